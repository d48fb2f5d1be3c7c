//! TSPLIB instances, tours and the EUC_2D metric.
//!
//! Only the `EUC_2D` edge weight type is supported. Distances follow the
//! TSPLIB `nint` convention, so tour lengths are integers that match the
//! published TSPLIB values.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

/// Instances up to this size get a precomputed distance matrix.
pub const MATRIX_MAX_DIMENSION: usize = 2_000;

/// Largest instance accepted by [`brute_force_optimum`].
pub const BRUTE_FORCE_MAX_DIMENSION: usize = 10;

#[derive(Debug, Error)]
pub enum TspError {
    #[error("line {line}: unsupported EDGE_WEIGHT_TYPE `{found}` (only EUC_2D)")]
    UnsupportedEdgeWeightType { line: usize, found: String },
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: expected {expected} coordinates, found {found}")]
    CoordCountMismatch { line: usize, expected: usize, found: usize },
    #[error("instance needs at least 3 cities, got {0}")]
    TooFewCities(usize),
    #[error("tour has {found} cities but instance has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("tour is not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("brute force limited to {max} cities, instance has {dimension}")]
    InstanceTooLarge { dimension: usize, max: usize },
    #[error("reading instance: {0}")]
    Io(#[from] std::io::Error),
}

/// TSPLIB `nint(sqrt(dx² + dy²))`, rounding half away from zero.
pub fn euc2d_distance(a: (f64, f64), b: (f64, f64)) -> u64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    // sqrt is nonnegative, so `+ 0.5` then truncate is round-half-up.
    ((dx * dx + dy * dy).sqrt() + 0.5) as u64
}

/// A symmetric EUC_2D problem instance.
#[derive(Clone)]
pub struct TspInstance {
    name: String,
    coords: Vec<(f64, f64)>,
    matrix: Option<Vec<u32>>,
}

impl fmt::Debug for TspInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TspInstance")
            .field("name", &self.name)
            .field("dimension", &self.coords.len())
            .finish()
    }
}

impl TspInstance {
    pub fn new(name: impl Into<String>, coords: Vec<(f64, f64)>) -> Result<Self, TspError> {
        if coords.len() < 3 {
            return Err(TspError::TooFewCities(coords.len()));
        }
        let n = coords.len();
        let matrix = (n <= MATRIX_MAX_DIMENSION).then(|| {
            let mut m = vec![0u32; n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = euc2d_distance(coords[i], coords[j]).min(u32::MAX as u64) as u32;
                    m[i * n + j] = d;
                    m[j * n + i] = d;
                }
            }
            m
        });
        Ok(Self {
            name: name.into(),
            coords,
            matrix,
        })
    }

    /// Uniformly scattered cities on a `side × side` square with integer
    /// coordinates, named `rand<n>`.
    pub fn random<R: Rng + ?Sized>(dimension: usize, side: f64, rng: &mut R) -> Result<Self, TspError> {
        let coords = (0..dimension)
            .map(|_| (rng.gen_range(0.0..side).floor(), rng.gen_range(0.0..side).floor()))
            .collect();
        Self::new(format!("rand{dimension}"), coords)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TspError> {
        let text = fs::read_to_string(path)?;
        parse_tsplib(&text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> u64 {
        match &self.matrix {
            Some(m) => m[i * self.coords.len() + j] as u64,
            None => euc2d_distance(self.coords[i], self.coords[j]),
        }
    }

    /// Closed tour length, including the edge from the last city back to the first.
    pub fn tour_length(&self, tour: &Tour) -> Result<u64, TspError> {
        if tour.len() != self.dimension() {
            return Err(TspError::DimensionMismatch {
                expected: self.dimension(),
                found: tour.len(),
            });
        }
        Ok(self.length_unchecked(tour.cities()))
    }

    fn length_unchecked(&self, order: &[u32]) -> u64 {
        let closing = self.distance(order[order.len() - 1] as usize, order[0] as usize);
        order
            .windows(2)
            .map(|w| self.distance(w[0] as usize, w[1] as usize))
            .sum::<u64>()
            + closing
    }

    pub fn evaluate(&self, tour: Tour) -> Result<Solution, TspError> {
        let fitness = self.tour_length(&tour)?;
        Ok(Solution { tour, fitness })
    }

    pub fn random_tour<R: Rng + ?Sized>(&self, rng: &mut R) -> Tour {
        let mut order: Vec<u32> = (0..self.dimension() as u32).collect();
        order.shuffle(rng);
        Tour { order }
    }

    /// Renders the instance back to TSPLIB text. Coordinates are written with
    /// Rust's shortest round-trip float formatting.
    pub fn to_tsplib(&self) -> String {
        let mut out = format!(
            "NAME : {}\nTYPE : TSP\nDIMENSION : {}\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n",
            self.name,
            self.dimension()
        );
        for (i, (x, y)) in self.coords.iter().enumerate() {
            out.push_str(&format!("{} {} {}\n", i + 1, x, y));
        }
        out.push_str("EOF\n");
        out
    }
}

/// Parses the EUC_2D subset of TSPLIB.
pub fn parse_tsplib(text: &str) -> Result<TspInstance, TspError> {
    let mut name: Option<String> = None;
    let mut dimension: Option<usize> = None;
    let mut edge_type: Option<String> = None;
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut in_coords = false;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            break;
        }
        if in_coords {
            if line.starts_with(|c: char| c.is_ascii_alphabetic()) {
                // Another section (e.g. DISPLAY_DATA_SECTION) ends the coordinates.
                in_coords = false;
            } else {
                let dim = dimension.unwrap_or(0);
                if coords.len() == dim {
                    return Err(TspError::CoordCountMismatch {
                        line: line_no,
                        expected: dim,
                        found: coords.len() + 1,
                    });
                }
                coords.push(parse_coord_line(line, line_no, coords.len() + 1)?);
                continue;
            }
        }
        if line.starts_with("NODE_COORD_SECTION") {
            if dimension.is_none() {
                return Err(TspError::MalformedHeader {
                    line: line_no,
                    reason: "NODE_COORD_SECTION before DIMENSION".into(),
                });
            }
            match edge_type.as_deref() {
                Some("EUC_2D") => {}
                Some(other) => {
                    return Err(TspError::UnsupportedEdgeWeightType {
                        line: line_no,
                        found: other.to_string(),
                    })
                }
                None => {
                    return Err(TspError::MalformedHeader {
                        line: line_no,
                        reason: "missing EDGE_WEIGHT_TYPE".into(),
                    })
                }
            }
            in_coords = true;
            continue;
        }
        if line.ends_with("_SECTION") {
            // Sections other than coordinates only appear for unsupported types.
            if let Some(t) = edge_type.as_deref().filter(|t| *t != "EUC_2D") {
                return Err(TspError::UnsupportedEdgeWeightType {
                    line: line_no,
                    found: t.to_string(),
                });
            }
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(TspError::MalformedHeader {
                line: line_no,
                reason: format!("expected `KEY : value`, got `{line}`"),
            });
        };
        let value = value.trim();
        match key.trim() {
            "NAME" => name = Some(value.to_string()),
            "DIMENSION" => {
                let d = value.parse::<usize>().map_err(|_| TspError::MalformedHeader {
                    line: line_no,
                    reason: format!("bad DIMENSION `{value}`"),
                })?;
                dimension = Some(d);
            }
            "EDGE_WEIGHT_TYPE" => {
                if value != "EUC_2D" {
                    return Err(TspError::UnsupportedEdgeWeightType {
                        line: line_no,
                        found: value.to_string(),
                    });
                }
                edge_type = Some(value.to_string());
            }
            "TYPE" if value != "TSP" => {
                return Err(TspError::MalformedHeader {
                    line: line_no,
                    reason: format!("unsupported TYPE `{value}`"),
                });
            }
            // COMMENT and other informational keys.
            _ => {}
        }
    }

    let name = name.ok_or_else(|| TspError::MalformedHeader {
        line: last_line,
        reason: "missing NAME".into(),
    })?;
    let dimension = dimension.ok_or_else(|| TspError::MalformedHeader {
        line: last_line,
        reason: "missing DIMENSION".into(),
    })?;
    if edge_type.is_none() {
        return Err(TspError::MalformedHeader {
            line: last_line,
            reason: "missing EDGE_WEIGHT_TYPE".into(),
        });
    }
    if coords.len() != dimension {
        return Err(TspError::CoordCountMismatch {
            line: last_line,
            expected: dimension,
            found: coords.len(),
        });
    }
    TspInstance::new(name, coords)
}

fn parse_coord_line(line: &str, line_no: usize, expected_index: usize) -> Result<(f64, f64), TspError> {
    let bad = |reason: String| TspError::MalformedHeader { line: line_no, reason };
    let mut parts = line.split_whitespace();
    let (Some(idx), Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad(format!("expected `index x y`, got `{line}`")));
    };
    let idx: usize = idx.parse().map_err(|_| bad(format!("bad city index `{idx}`")))?;
    if idx != expected_index {
        return Err(bad(format!("city index {idx}, expected {expected_index}")));
    }
    let x: f64 = x.parse().map_err(|_| bad(format!("bad x coordinate `{x}`")))?;
    let y: f64 = y.parse().map_err(|_| bad(format!("bad y coordinate `{y}`")))?;
    if !x.is_finite() || !y.is_finite() {
        return Err(bad("non-finite coordinate".into()));
    }
    Ok((x, y))
}

/// A closed tour: a permutation of city indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Tour {
    order: Vec<u32>,
}

impl Tour {
    pub fn new(order: Vec<u32>) -> Result<Self, TspError> {
        if !is_permutation(&order) {
            return Err(TspError::NotAPermutation(order.len()));
        }
        Ok(Self { order })
    }

    /// Identity tour `0, 1, …, n-1`.
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n as u32).collect(),
        }
    }

    pub(crate) fn from_vec_unchecked(order: Vec<u32>) -> Self {
        debug_assert!(is_permutation(&order));
        Self { order }
    }

    pub fn cities(&self) -> &[u32] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.order
    }

    pub fn rotated(&self, k: usize) -> Tour {
        let mut order = self.order.clone();
        if !order.is_empty() {
            let k = k % order.len();
            order.rotate_left(k);
        }
        Tour { order }
    }

    pub fn reversed(&self) -> Tour {
        let mut order = self.order.clone();
        order.reverse();
        Tour { order }
    }

    /// Representative of the tour's cycle class: rotated so city 0 comes first
    /// and oriented so the second city is smaller than the last.
    pub fn canonical(&self) -> Tour {
        let Some(start) = self.order.iter().position(|&c| c == 0) else {
            return self.clone();
        };
        let mut t = self.rotated(start);
        let n = t.order.len();
        if n > 2 && t.order[1] > t.order[n - 1] {
            t.order[1..].reverse();
        }
        t
    }
}

pub fn is_permutation(order: &[u32]) -> bool {
    let mut seen = vec![false; order.len()];
    for &c in order {
        match seen.get_mut(c as usize) {
            Some(s) if !*s => *s = true,
            _ => return false,
        }
    }
    true
}

/// A tour together with its length. Lower is better.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Solution {
    pub tour: Tour,
    pub fitness: u64,
}

/// Exhaustive search over the `(n-1)!/2` distinct cycles.
pub fn brute_force_optimum(instance: &TspInstance) -> Result<(Tour, u64), TspError> {
    let n = instance.dimension();
    if n > BRUTE_FORCE_MAX_DIMENSION {
        return Err(TspError::InstanceTooLarge {
            dimension: n,
            max: BRUTE_FORCE_MAX_DIMENSION,
        });
    }
    let mut rest: Vec<u32> = (1..n as u32).collect();
    let mut order = vec![0u32; n];
    let mut best: Option<(Vec<u32>, u64)> = None;

    // Heap's algorithm over cities 1..n; city 0 stays first.
    let mut consider = |rest: &[u32]| {
        // Each cycle is visited in both directions; keep one.
        if rest[0] > rest[rest.len() - 1] {
            return;
        }
        order[1..].copy_from_slice(rest);
        let len = instance.length_unchecked(&order);
        if best.as_ref().is_none_or(|(_, b)| len < *b) {
            best = Some((order.clone(), len));
        }
    };
    let m = rest.len();
    let mut c = vec![0usize; m];
    consider(&rest);
    let mut i = 0;
    while i < m {
        if c[i] < i {
            if i % 2 == 0 {
                rest.swap(0, i);
            } else {
                rest.swap(c[i], i);
            }
            consider(&rest);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let (order, len) = best.expect("at least one tour exists");
    Ok((Tour::from_vec_unchecked(order), len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TRIANGLE: &str = "NAME : tri\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 10 0\n3 5 8.66\nEOF\n";

    fn square() -> TspInstance {
        TspInstance::new("sq", vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).unwrap()
    }

    #[test]
    fn parses_minimal_file() {
        let inst = parse_tsplib(TRIANGLE).unwrap();
        assert_eq!(inst.name(), "tri");
        assert_eq!(inst.dimension(), 3);
        assert_eq!(inst.coords()[2], (5.0, 8.66));
    }

    #[test]
    fn rejects_explicit_weights() {
        let text = "NAME : x\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EXPLICIT\nEDGE_WEIGHT_FORMAT : FULL_MATRIX\nEDGE_WEIGHT_SECTION\n0 1 2\n";
        assert!(matches!(
            parse_tsplib(text),
            Err(TspError::UnsupportedEdgeWeightType { line: 4, .. })
        ));
    }

    #[test]
    fn coordinate_count_mismatch_reports_line() {
        let short =
            "NAME : x\nDIMENSION : 4\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 1\n3 2 2\nEOF\n";
        assert!(matches!(
            parse_tsplib(short),
            Err(TspError::CoordCountMismatch {
                expected: 4,
                found: 3,
                ..
            })
        ));
        let long =
            "NAME : x\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 1\n3 2 2\n4 3 3\nEOF\n";
        assert!(matches!(
            parse_tsplib(long),
            Err(TspError::CoordCountMismatch { line: 8, .. })
        ));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            parse_tsplib("NAME x\n"),
            Err(TspError::MalformedHeader { line: 1, .. })
        ));
        assert!(matches!(
            parse_tsplib("NAME : x\nDIMENSION : three\n"),
            Err(TspError::MalformedHeader { line: 2, .. })
        ));
        let no_dim = "NAME : x\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n";
        assert!(matches!(
            parse_tsplib(no_dim),
            Err(TspError::MalformedHeader { line: 3, .. })
        ));
    }

    #[test]
    fn tolerates_whitespace_and_display_section() {
        let text = "NAME:ws\nCOMMENT : spaced   out\nTYPE: TSP\nDIMENSION:3\nEDGE_WEIGHT_TYPE:   EUC_2D\nNODE_COORD_SECTION\n  1   0.5   0  \n2\t3 4\n3 6 8\nDISPLAY_DATA_SECTION\n";
        let inst = parse_tsplib(text).unwrap();
        assert_eq!(inst.coords(), &[(0.5, 0.0), (3.0, 4.0), (6.0, 8.0)]);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euc2d_distance((0.0, 0.0), (3.0, 4.0)), 5);
        // sqrt(2) = 1.41421356…
        assert_eq!(euc2d_distance((0.0, 0.0), (1.0, 1.0)), 1);
        assert_eq!(euc2d_distance((0.0, 0.0), (0.0, 0.0)), 0);
        // Exact half rounds up: sqrt(6.25) = 2.5.
        assert_eq!(euc2d_distance((0.0, 0.0), (1.5, 2.0)), 3);
    }

    #[test]
    fn triangle_length() {
        let inst = parse_tsplib(TRIANGLE).unwrap();
        // Edges: 10, sqrt(99.9956) -> 10, sqrt(99.9956) -> 10.
        let t = Tour::new(vec![0, 1, 2]).unwrap();
        assert_eq!(inst.tour_length(&t).unwrap(), 30);
        assert_eq!(inst.tour_length(&t.reversed()).unwrap(), 30);
    }

    #[test]
    fn coincident_points_have_zero_length() {
        let inst = TspInstance::new("pt", vec![(2.0, 2.0); 5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inst.tour_length(&inst.random_tour(&mut rng)).unwrap(), 0);
    }

    #[test]
    fn wrong_tour_size_is_rejected() {
        let inst = square();
        assert!(matches!(
            inst.tour_length(&Tour::identity(3)),
            Err(TspError::DimensionMismatch { expected: 4, found: 3 })
        ));
        assert!(Tour::new(vec![0, 1, 1]).is_err());
        assert!(Tour::new(vec![0, 1, 3]).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let inst = parse_tsplib(TRIANGLE).unwrap();
        let (_, len) = brute_force_optimum(&inst).unwrap();
        assert_eq!(len, 30);
        // Every cycle on the unit square has length 4: diagonals round to 1.
        let (t, len) = brute_force_optimum(&square()).unwrap();
        assert_eq!(len, 4);
        assert_eq!(square().tour_length(&t).unwrap(), 4);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = TspInstance::random(11, 100.0, &mut rng).unwrap();
        assert!(matches!(
            brute_force_optimum(&big),
            Err(TspError::InstanceTooLarge { dimension: 11, max: 10 })
        ));
    }

    #[test]
    fn brute_force_agrees_with_full_enumeration() {
        // Independent route: all (n-1)! orders with city 0 first, no direction pruning.
        fn all_orders(prefix: &mut Vec<u32>, left: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if left.is_empty() {
                out.push(prefix.clone());
                return;
            }
            for i in 0..left.len() {
                let c = left.remove(i);
                prefix.push(c);
                all_orders(prefix, left, out);
                prefix.pop();
                left.insert(i, c);
            }
        }
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TspInstance::random(7, 1000.0, &mut rng).unwrap();
            let mut orders = Vec::new();
            all_orders(&mut vec![0], &mut (1..7).collect(), &mut orders);
            assert_eq!(orders.len(), 720);
            let expected = orders
                .into_iter()
                .map(|o| inst.tour_length(&Tour::new(o).unwrap()).unwrap())
                .min()
                .unwrap();
            assert_eq!(brute_force_optimum(&inst).unwrap().1, expected);
        }
    }

    #[test]
    fn brute_force_beats_random_tours() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = TspInstance::random(9, 500.0, &mut rng).unwrap();
        let (_, best) = brute_force_optimum(&inst).unwrap();
        for _ in 0..1000 {
            let t = inst.random_tour(&mut rng);
            assert!(best <= inst.tour_length(&t).unwrap());
        }
    }

    #[test]
    fn canonical_form_is_rotation_and_direction_free() {
        let t = Tour::new(vec![3, 0, 4, 1, 2]).unwrap();
        let c = t.canonical();
        assert_eq!(c.cities()[0], 0);
        assert_eq!(t.rotated(2).canonical(), c);
        assert_eq!(t.reversed().canonical(), c);
    }

    proptest! {
        #[test]
        fn distance_symmetric_and_nearly_metric(
            a in (-1e4f64..1e4, -1e4f64..1e4),
            b in (-1e4f64..1e4, -1e4f64..1e4),
            c in (-1e4f64..1e4, -1e4f64..1e4),
        ) {
            let ab = euc2d_distance(a, b);
            prop_assert_eq!(ab, euc2d_distance(b, a));
            prop_assert!(euc2d_distance(a, c) <= ab + euc2d_distance(b, c) + 1);
        }

        #[test]
        fn length_invariant_under_rotation_and_reversal(seed in any::<u64>(), k in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = TspInstance::random(20, 1000.0, &mut rng).unwrap();
            let t = inst.random_tour(&mut rng);
            let len = inst.tour_length(&t).unwrap();
            prop_assert_eq!(inst.tour_length(&t.rotated(k)).unwrap(), len);
            prop_assert_eq!(inst.tour_length(&t.reversed()).unwrap(), len);
        }

        #[test]
        fn tsplib_text_round_trips_coordinates(
            coords in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 3..50)
        ) {
            let inst = TspInstance::new("rt", coords.clone()).unwrap();
            let back = parse_tsplib(&inst.to_tsplib()).unwrap();
            prop_assert_eq!(back.coords(), &coords[..]);
        }
    }
}
