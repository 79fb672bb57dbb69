//! Square QAM constellations, Gray mapping and symbol decomposition.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::numerics::{CVec, RMat, C64};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModemError {
    #[error("unsupported constellation order {0} (expected 4, 16 or 64)")]
    UnsupportedOrder(usize),
    #[error("bit count {len} is not a multiple of {per_symbol}")]
    BitLength { len: usize, per_symbol: usize },
    #[error("bit {index} has value {value}, expected 0 or 1")]
    InvalidBit { index: usize, value: u8 },
    #[error("symbol {index} ({value}) is not a constellation point")]
    NotAPoint { index: usize, value: C64 },
    #[error("symbol {index} is zero")]
    ZeroSymbol { index: usize },
    #[error("detection scale must be positive, got {0}")]
    NonPositiveScale(f64),
}

/// Whether an axis component lies on the constellation boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Outer,
    Inner,
}

/// Unit-energy square QAM with a per-axis reflected Gray map.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: usize,
    side: usize,
    bits_per_axis: usize,
    scale: f64,
    levels: Vec<f64>,
    points: Vec<C64>,
}

const LEVEL_TOL: f64 = 1e-9;

pub fn make_square_qam(order: usize) -> Result<Constellation, ModemError> {
    let (side, bits_per_axis) = match order {
        4 => (2, 1),
        16 => (4, 2),
        64 => (8, 3),
        _ => return Err(ModemError::UnsupportedOrder(order)),
    };
    // mean energy of the odd-integer grid is 2(q² − 1)/3
    let scale = (2.0 * ((side * side - 1) as f64) / 3.0).sqrt();
    let levels: Vec<f64> = (0..side)
        .map(|i| (2.0 * i as f64 - (side as f64 - 1.0)) / scale)
        .collect();
    let mut points = vec![C64::new(0.0, 0.0); order];
    for re in 0..side {
        for im in 0..side {
            let label = (gray(re) << bits_per_axis) | gray(im);
            points[label] = C64::new(levels[re], levels[im]);
        }
    }
    Ok(Constellation {
        order,
        side,
        bits_per_axis,
        scale,
        levels,
        points,
    })
}

fn gray(i: usize) -> usize {
    i ^ (i >> 1)
}

impl Constellation {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_axis
    }

    /// Ascending per-axis amplitude levels.
    pub fn amplitude_levels(&self) -> &[f64] {
        &self.levels
    }

    /// Points indexed by their Gray label.
    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn max_level(&self) -> f64 {
        self.levels[self.side - 1]
    }

    /// Energy normalizer: √2, √10 or √42.
    pub fn normalizer(&self) -> f64 {
        self.scale
    }

    /// Index of the level matching `x`, if any.
    fn level_index(&self, x: f64) -> Option<usize> {
        let idx = self.nearest_level(x);
        ((self.levels[idx] - x).abs() <= LEVEL_TOL).then_some(idx)
    }

    fn nearest_level(&self, x: f64) -> usize {
        let pos = ((x * self.scale + (self.side as f64 - 1.0)) / 2.0).round();
        pos.clamp(0.0, (self.side - 1) as f64) as usize
    }

    fn axis_bits(&self, level: usize, out: &mut Vec<u8>) {
        let code = gray(level);
        for b in (0..self.bits_per_axis).rev() {
            out.push(((code >> b) & 1) as u8);
        }
    }

    fn axis_level(&self, bits: &[u8]) -> usize {
        let code = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        // inverse Gray
        let mut level = code;
        let mut shift = code >> 1;
        while shift != 0 {
            level ^= shift;
            shift >>= 1;
        }
        level
    }

    /// Gray bits of the point nearest to `z` (per-axis slicing).
    pub fn slice_bits(&self, z: C64, out: &mut Vec<u8>) {
        self.axis_bits(self.nearest_level(z.re), out);
        self.axis_bits(self.nearest_level(z.im), out);
    }

    pub fn slice_point(&self, z: C64) -> C64 {
        C64::new(
            self.levels[self.nearest_level(z.re)],
            self.levels[self.nearest_level(z.im)],
        )
    }

    pub fn contains(&self, s: C64) -> bool {
        self.level_index(s.re).is_some() && self.level_index(s.im).is_some()
    }
}

/// Maps a bit stream to symbols, real-axis bits first, MSB first per axis.
pub fn map_bits(bits: &[u8], c: &Constellation) -> Result<Vec<C64>, ModemError> {
    let per_symbol = c.bits_per_symbol();
    if bits.len() % per_symbol != 0 {
        return Err(ModemError::BitLength {
            len: bits.len(),
            per_symbol,
        });
    }
    if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
        return Err(ModemError::InvalidBit { index, value });
    }
    let half = c.bits_per_axis;
    Ok(bits
        .chunks(per_symbol)
        .map(|chunk| {
            let re = c.axis_level(&chunk[..half]);
            let im = c.axis_level(&chunk[half..]);
            C64::new(c.levels[re], c.levels[im])
        })
        .collect())
}

/// Splits a symbol along the detection thresholds into its real part and
/// the magnitude-carrying imaginary part.
pub fn decompose_symbol(s: C64) -> (f64, f64) {
    (s.re, s.im)
}

pub fn classify_components(s: &[C64], c: &Constellation) -> Result<Vec<Component>, ModemError> {
    let top = c.side - 1;
    let mut mask = Vec::with_capacity(2 * s.len());
    for (index, &value) in s.iter().enumerate() {
        let (re, im) = match (c.level_index(value.re), c.level_index(value.im)) {
            (Some(re), Some(im)) => (re, im),
            _ => return Err(ModemError::NotAPoint { index, value }),
        };
        for level in [re, im] {
            mask.push(if level == 0 || level == top {
                Component::Outer
            } else {
                Component::Inner
            });
        }
    }
    Ok(mask)
}

/// A user symbol vector together with its component expansion.
///
/// `s_e` interleaves `(Re s₁, j·Im s₁, Re s₂, j·Im s₂, …)`, so that pairwise
/// sums recompose the symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub s: CVec,
    pub s_e: CVec,
    pub s_hat: CVec,
    pub mask: Vec<Component>,
}

impl SymbolFrame {
    pub fn users(&self) -> usize {
        self.s.len()
    }

    /// Pairing matrix `I_K ⊗ [1, 1]`.
    pub fn pairing(&self) -> RMat {
        pairing_matrix(self.users())
    }

    pub fn outer_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == Component::Outer).count()
    }

    pub fn outer_indices(&self) -> Vec<usize> {
        indices_of(&self.mask, Component::Outer)
    }

    pub fn inner_indices(&self) -> Vec<usize> {
        indices_of(&self.mask, Component::Inner)
    }

    /// `U · diag(ω) · s_E`: the noiseless received symbols for scaling `ω`.
    pub fn scaled_symbols(&self, omega: &[f64]) -> CVec {
        CVec::from_fn(self.users(), |k, _| {
            self.s_e[2 * k] * omega[2 * k] + self.s_e[2 * k + 1] * omega[2 * k + 1]
        })
    }
}

fn indices_of(mask: &[Component], kind: Component) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m == kind)
        .map(|(i, _)| i)
        .collect()
}

pub fn pairing_matrix(k: usize) -> RMat {
    DMatrix::from_fn(k, 2 * k, |r, c| if c / 2 == r { 1.0 } else { 0.0 })
}

pub fn build_expansion(s: &[C64], c: &Constellation) -> Result<SymbolFrame, ModemError> {
    if let Some(index) = s.iter().position(|z| z.norm_sqr() == 0.0) {
        return Err(ModemError::ZeroSymbol { index });
    }
    let mask = classify_components(s, c)?;
    let mut s_e = CVec::zeros(2 * s.len());
    for (k, &z) in s.iter().enumerate() {
        let (a, b) = decompose_symbol(z);
        s_e[2 * k] = C64::new(a, 0.0);
        s_e[2 * k + 1] = C64::new(0.0, b);
    }
    Ok(SymbolFrame {
        s: CVec::from_column_slice(s),
        s_e,
        s_hat: CVec::from_iterator(s.len(), s.iter().map(|z| z.inv())),
        mask,
    })
}

/// Minimum-distance decision on `r / scale`.
pub fn detect_symbol(r: C64, scale: f64, c: &Constellation) -> Result<(C64, Vec<u8>), ModemError> {
    if !(scale > 0.0) {
        return Err(ModemError::NonPositiveScale(scale));
    }
    let z = r / scale;
    let mut bits = Vec::with_capacity(c.bits_per_symbol());
    c.slice_bits(z, &mut bits);
    Ok((c.slice_point(z), bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qam16() -> Constellation {
        make_square_qam(16).unwrap()
    }

    fn close(a: C64, b: C64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn levels_are_normalized() {
        let r2 = 2f64.sqrt();
        let r10 = 10f64.sqrt();
        let r42 = 42f64.sqrt();
        assert_eq!(make_square_qam(4).unwrap().amplitude_levels(), &[-1.0 / r2, 1.0 / r2]);
        let l16 = qam16().amplitude_levels().to_vec();
        for (got, want) in l16.iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert!((got - want / r10).abs() < 1e-15);
        }
        let l64 = make_square_qam(64).unwrap().amplitude_levels().to_vec();
        for (got, want) in l64.iter().zip([-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0]) {
            assert!((got - want / r42).abs() < 1e-15);
        }
    }

    #[test]
    fn unsupported_order() {
        assert_eq!(make_square_qam(8), Err(ModemError::UnsupportedOrder(8)));
        assert_eq!(make_square_qam(256), Err(ModemError::UnsupportedOrder(256)));
    }

    #[test]
    fn unit_average_energy() {
        for order in [4, 16, 64] {
            let c = make_square_qam(order).unwrap();
            let e: f64 = c.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / order as f64;
            assert!((e - 1.0).abs() < 1e-12, "order {order}: {e}");
        }
    }

    #[test]
    fn gray_table_16() {
        let c = qam16();
        let r10 = 10f64.sqrt();
        let m = |b: [u8; 4]| map_bits(&b, &c).unwrap()[0];
        assert!(close(m([0, 0, 0, 0]), C64::new(-3.0, -3.0) / r10));
        assert!(close(m([1, 1, 1, 1]), C64::new(1.0, 1.0) / r10));
        assert!(close(m([1, 0, 1, 0]), C64::new(3.0, 3.0) / r10));
        assert!(close(m([0, 1, 1, 0]), C64::new(-1.0, 3.0) / r10));
    }

    #[test]
    fn gray_table_64_axis() {
        let c = make_square_qam(64).unwrap();
        let r42 = 42f64.sqrt();
        let table: [([u8; 3], f64); 8] = [
            ([0, 0, 0], -7.0),
            ([0, 0, 1], -5.0),
            ([0, 1, 1], -3.0),
            ([0, 1, 0], -1.0),
            ([1, 1, 0], 1.0),
            ([1, 1, 1], 3.0),
            ([1, 0, 1], 5.0),
            ([1, 0, 0], 7.0),
        ];
        for (bits, level) in table {
            let mut b = bits.to_vec();
            b.extend_from_slice(&[0, 0, 0]);
            let s = map_bits(&b, &c).unwrap()[0];
            assert!((s.re - level / r42).abs() < 1e-15);
            assert!((s.im + 7.0 / r42).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacent_levels_differ_in_one_bit() {
        for order in [4, 16, 64] {
            let c = make_square_qam(order).unwrap();
            for i in 1..c.side {
                assert_eq!((gray(i) ^ gray(i - 1)).count_ones(), 1);
            }
            let mut labels: Vec<usize> = (0..c.side).map(gray).collect();
            labels.sort_unstable();
            assert_eq!(labels, (0..c.side).collect::<Vec<_>>());
        }
    }

    #[test]
    fn map_bits_length_and_values() {
        let c = qam16();
        assert_eq!(
            map_bits(&[0, 1, 0], &c),
            Err(ModemError::BitLength { len: 3, per_symbol: 4 })
        );
        assert_eq!(
            map_bits(&[0, 2, 0, 0], &c),
            Err(ModemError::InvalidBit { index: 1, value: 2 })
        );
    }

    #[test]
    fn decompose_examples() {
        let r10 = 10f64.sqrt();
        assert_eq!(decompose_symbol(C64::new(3.0, 1.0) / r10), (3.0 / r10, 1.0 / r10));
        assert_eq!(decompose_symbol(C64::new(0.5, 0.0)).1, 0.0);
        for &p in qam16().points() {
            let (a, b) = decompose_symbol(p);
            assert_eq!(C64::new(a, 0.0) + C64::new(0.0, b), p);
        }
    }

    #[test]
    fn classification_examples() {
        use Component::*;
        let c = qam16();
        let r10 = 10f64.sqrt();
        let cls = |z: C64| classify_components(&[z / r10], &c).unwrap();
        assert_eq!(cls(C64::new(3.0, 3.0)), vec![Outer, Outer]);
        assert_eq!(cls(C64::new(1.0, 1.0)), vec![Inner, Inner]);
        assert_eq!(cls(C64::new(3.0, 1.0)), vec![Outer, Inner]);
        assert_eq!(cls(C64::new(-3.0, -1.0)), vec![Outer, Inner]);
        let q = make_square_qam(4).unwrap();
        for &p in q.points() {
            assert_eq!(classify_components(&[p], &q).unwrap(), vec![Outer, Outer]);
        }
        assert!(matches!(
            classify_components(&[C64::new(0.2, 0.3)], &c),
            Err(ModemError::NotAPoint { index: 0, .. })
        ));
    }

    #[test]
    fn pairing_matrix_k2() {
        let u = pairing_matrix(2);
        assert_eq!(
            u,
            RMat::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0])
        );
    }

    #[test]
    fn expansion_recomposes_symbols() {
        let c = qam16();
        let s: Vec<C64> = vec![c.points()[3], c.points()[9], c.points()[14]];
        let f = build_expansion(&s, &c).unwrap();
        let back = f.scaled_symbols(&[1.0; 6]);
        for k in 0..3 {
            assert!(close(back[k], s[k]));
        }
        let u = crate::numerics::to_complex(&f.pairing());
        assert!((u * &f.s_e - &f.s).norm() < 1e-15);
        let shat_s: C64 = f.s_hat.iter().zip(f.s.iter()).map(|(a, b)| a * b).sum();
        assert!(close(shat_s, C64::new(3.0, 0.0)));
        assert_eq!(f.mask.len(), 6);
    }

    #[test]
    fn expansion_rejects_zero() {
        let c = qam16();
        assert_eq!(
            build_expansion(&[c.points()[0], C64::new(0.0, 0.0)], &c),
            Err(ModemError::ZeroSymbol { index: 1 })
        );
    }

    #[test]
    fn detect_rejects_bad_scale() {
        let c = qam16();
        assert_eq!(detect_symbol(C64::new(1.0, 0.0), 0.0, &c), Err(ModemError::NonPositiveScale(0.0)));
        assert!(detect_symbol(C64::new(1.0, 0.0), -1.0, &c).is_err());
    }

    #[test]
    fn detect_outward_push_stays_in_region() {
        let c = qam16();
        let r10 = 10f64.sqrt();
        let s = C64::new(3.0, 1.0) / r10;
        let t = 0.37;
        let r = C64::new(s.re + 5.0, s.im) * t;
        assert!(close(detect_symbol(r, t, &c).unwrap().0, s));
    }

    fn brute_force(z: C64, c: &Constellation) -> C64 {
        *c.points()
            .iter()
            .min_by(|a, b| (z - **a).norm().partial_cmp(&(z - **b).norm()).unwrap())
            .unwrap()
    }

    proptest! {
        #[test]
        fn roundtrip_noiseless(order in prop::sample::select(vec![4usize, 16, 64]),
                               raw in prop::collection::vec(0u8..2, 1..16),
                               t in 0.01f64..10.0) {
            let c = make_square_qam(order).unwrap();
            let per = c.bits_per_symbol();
            let n = (raw.len() / per).max(1) * per;
            let bits: Vec<u8> = raw.iter().cycle().take(n).copied().collect();
            let syms = map_bits(&bits, &c).unwrap();
            let mut out = Vec::new();
            for &s in &syms {
                let (p, b) = detect_symbol(s * t, t, &c).unwrap();
                prop_assert!(close(p, s));
                out.extend(b);
            }
            prop_assert_eq!(out, bits);
        }

        #[test]
        fn slicing_matches_min_distance(order in prop::sample::select(vec![4usize, 16, 64]),
                                        re in -2.0f64..2.0, im in -2.0f64..2.0) {
            let c = make_square_qam(order).unwrap();
            let z = C64::new(re, im);
            let (p, _) = detect_symbol(z, 1.0, &c).unwrap();
            let q = brute_force(z, &c);
            // equal distance ties are measure zero
            prop_assert!((z - p).norm() <= (z - q).norm() + 1e-12);
        }

        #[test]
        fn mask_counts(order in prop::sample::select(vec![4usize, 16, 64]),
                       idx in prop::collection::vec(0usize..64, 1..10)) {
            let c = make_square_qam(order).unwrap();
            let s: Vec<C64> = idx.iter().map(|&i| c.points()[i % order]).collect();
            let mask = classify_components(&s, &c).unwrap();
            prop_assert_eq!(mask.len(), 2 * s.len());
            let max = c.max_level();
            for (i, m) in mask.iter().enumerate() {
                let v = if i % 2 == 0 { s[i / 2].re } else { s[i / 2].im };
                let on_edge = (v.abs() - max).abs() < 1e-12;
                prop_assert_eq!(*m == Component::Outer, on_edge);
            }
            if order == 4 {
                prop_assert!(mask.iter().all(|&m| m == Component::Outer));
            }
        }
    }
}
