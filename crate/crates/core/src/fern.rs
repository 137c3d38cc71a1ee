//! Fern-based keyframe encoding and retrieval for place recognition.
//!
//! Each fern evaluates four binary pixel tests on a downsampled RGB-D view
//! and yields a 4-bit code; a view is summarized by one code per fern.
//! Dissimilarity between two views is the fraction of ferns whose codes
//! differ. A database of harvested keyframes answers nearest-view queries
//! through an inverted index from (fern, code) to entry ids, which counts
//! code agreements instead of comparing full encodings.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frame::Grid;
use crate::geometry::RigidTransform;

pub const DEFAULT_NUM_FERNS: usize = 500;
pub const DEFAULT_FERN_WIDTH: usize = 80;
pub const DEFAULT_FERN_HEIGHT: usize = 60;
/// New keyframes are harvested only when the nearest stored view is more
/// dissimilar than this.
pub const DEFAULT_T_ADD: f64 = 0.1;
/// Queries match only when the nearest stored view is less dissimilar than
/// this.
pub const DEFAULT_T_MATCH: f64 = 0.2;
/// Depth tests draw their thresholds from the indoor working range, meters.
pub const DEPTH_THRESHOLD_MIN: f64 = 0.5;
pub const DEPTH_THRESHOLD_MAX: f64 = 4.0;

#[derive(Debug, Error)]
pub enum FernError {
    #[error("view is {got_width}x{got_height}, spec expects {want_width}x{want_height}")]
    ResolutionMismatch {
        want_width: usize,
        want_height: usize,
        got_width: usize,
        got_height: usize,
    },
    #[error("encodings were produced by different fern specs")]
    SpecMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    R,
    G,
    B,
    D,
}

/// One binary test: read `channel` at (x, y) on the downsampled view and
/// emit 1 iff the value is >= threshold. Invalid depth reads as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FernTest {
    pub x: u32,
    pub y: u32,
    pub channel: Channel,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fern {
    pub tests: [FernTest; 4],
}

/// The set of fern tests shared by every encoding and database in a session.
/// Two specs with identical content carry identical fingerprints, so
/// encodings remember which spec produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FernSpec {
    width: usize,
    height: usize,
    ferns: Vec<Fern>,
    fingerprint: u64,
}

impl FernSpec {
    /// Draws `num_ferns` ferns from a seeded generator: uniform pixel
    /// coordinates, uniform channel, color thresholds uniform on [0, 255]
    /// and depth thresholds uniform on the working range.
    pub fn generate(num_ferns: usize, width: usize, height: usize, seed: u64) -> Self {
        assert!(num_ferns > 0 && width > 0 && height > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ferns = (0..num_ferns)
            .map(|_| Fern {
                tests: std::array::from_fn(|_| {
                    let x = rng.gen_range(0..width) as u32;
                    let y = rng.gen_range(0..height) as u32;
                    let channel = match rng.gen_range(0..4u8) {
                        0 => Channel::R,
                        1 => Channel::G,
                        2 => Channel::B,
                        _ => Channel::D,
                    };
                    let threshold = if channel == Channel::D {
                        rng.gen_range(DEPTH_THRESHOLD_MIN..=DEPTH_THRESHOLD_MAX)
                    } else {
                        rng.gen_range(0.0..=255.0)
                    };
                    FernTest {
                        x,
                        y,
                        channel,
                        threshold,
                    }
                }),
            })
            .collect();
        Self::from_tests(width, height, ferns)
    }

    /// Builds a spec from explicit tests; coordinates must fall inside the
    /// downsampled bounds.
    pub fn from_tests(width: usize, height: usize, ferns: Vec<Fern>) -> Self {
        assert!(!ferns.is_empty());
        for fern in &ferns {
            for t in &fern.tests {
                assert!(
                    (t.x as usize) < width && (t.y as usize) < height,
                    "fern test out of bounds"
                );
            }
        }
        let fingerprint = fingerprint(width, height, &ferns);
        Self {
            width,
            height,
            ferns,
            fingerprint,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_ferns(&self) -> usize {
        self.ferns.len()
    }

    pub fn ferns(&self) -> &[Fern] {
        &self.ferns
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

/// FNV-1a over the spec content; collisions are irrelevant here, the hash
/// only guards against mixing encodings from different sessions.
fn fingerprint(width: usize, height: usize, ferns: &[Fern]) -> u64 {
    fn mix(h: &mut u64, v: u64) {
        for b in v.to_le_bytes() {
            *h = (*h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    mix(&mut h, width as u64);
    mix(&mut h, height as u64);
    for fern in ferns {
        for t in &fern.tests {
            mix(&mut h, t.x as u64);
            mix(&mut h, t.y as u64);
            mix(&mut h, t.channel as u64);
            mix(&mut h, t.threshold.to_bits());
        }
    }
    h
}

/// One 4-bit code per fern; bit i of a code is the outcome of test i.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FernEncoding {
    codes: Vec<u8>,
    fingerprint: u64,
}

impl FernEncoding {
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    #[cfg(test)]
    pub(crate) fn from_codes(codes: Vec<u8>, spec: &FernSpec) -> Self {
        assert_eq!(codes.len(), spec.num_ferns());
        Self {
            codes,
            fingerprint: spec.fingerprint,
        }
    }
}

/// Downsampled RGB-D view at spec resolution; stored with each keyframe so
/// matches can seed a registration without re-rendering.
#[derive(Clone, Debug)]
pub struct FernSnapshot {
    pub color: Grid<[u8; 3]>,
    pub depth: Grid<f32>,
}

impl FernSnapshot {
    pub fn new(color: Grid<[u8; 3]>, depth: Grid<f32>) -> Self {
        assert_eq!(
            (color.width(), color.height()),
            (depth.width(), depth.height())
        );
        Self { color, depth }
    }

    /// Block-downsamples a full-resolution view: color by rounded mean,
    /// depth by the lower median of valid samples (0 when the whole block is
    /// invalid), mirroring the pyramid convention of never inventing depths.
    pub fn downsample_from(
        color: &Grid<[u8; 3]>,
        depth: &Grid<f32>,
        width: usize,
        height: usize,
    ) -> Self {
        assert_eq!(
            (color.width(), color.height()),
            (depth.width(), depth.height())
        );
        assert!(width <= color.width() && height <= color.height());
        let (sw, sh) = (color.width(), color.height());
        let mut out_color = Grid::filled(width, height, [0u8; 3]);
        let mut out_depth = Grid::filled(width, height, 0.0f32);
        let mut block_depths = Vec::new();
        for y in 0..height {
            for x in 0..width {
                let (x0, x1) = (x * sw / width, (x + 1) * sw / width);
                let (y0, y1) = (y * sh / height, (y + 1) * sh / height);
                let mut sum = [0f64; 3];
                block_depths.clear();
                for sy in y0..y1 {
                    for sx in x0..x1 {
                        let c = color.get(sx, sy);
                        for (acc, v) in sum.iter_mut().zip(c) {
                            *acc += v as f64;
                        }
                        let d = depth.get(sx, sy);
                        if d > 0.0 {
                            block_depths.push(d);
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0)) as f64;
                out_color.set(
                    x,
                    y,
                    [
                        (sum[0] / count).round() as u8,
                        (sum[1] / count).round() as u8,
                        (sum[2] / count).round() as u8,
                    ],
                );
                if !block_depths.is_empty() {
                    block_depths.sort_by(f32::total_cmp);
                    out_depth.set(x, y, block_depths[(block_depths.len() - 1) / 2]);
                }
            }
        }
        Self::new(out_color, out_depth)
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Evaluates every fern test on the view. Deterministic in (view, spec).
pub fn encode(view: &FernSnapshot, spec: &FernSpec) -> Result<FernEncoding, FernError> {
    if view.width() != spec.width || view.height() != spec.height {
        return Err(FernError::ResolutionMismatch {
            want_width: spec.width,
            want_height: spec.height,
            got_width: view.width(),
            got_height: view.height(),
        });
    }
    let codes = spec
        .ferns
        .iter()
        .map(|fern| {
            let mut code = 0u8;
            for (i, t) in fern.tests.iter().enumerate() {
                let (x, y) = (t.x as usize, t.y as usize);
                let value = match t.channel {
                    Channel::R => view.color.get(x, y)[0] as f64,
                    Channel::G => view.color.get(x, y)[1] as f64,
                    Channel::B => view.color.get(x, y)[2] as f64,
                    Channel::D => view.depth.get(x, y) as f64,
                };
                if value >= t.threshold {
                    code |= 1 << i;
                }
            }
            code
        })
        .collect();
    Ok(FernEncoding {
        codes,
        fingerprint: spec.fingerprint,
    })
}

/// Block Hamming distance: the fraction of ferns whose codes differ.
pub fn dissimilarity(a: &FernEncoding, b: &FernEncoding) -> Result<f64, FernError> {
    if a.fingerprint != b.fingerprint {
        return Err(FernError::SpecMismatch);
    }
    let differing = a
        .codes
        .iter()
        .zip(&b.codes)
        .filter(|(ca, cb)| ca != cb)
        .count();
    Ok(differing as f64 / a.codes.len() as f64)
}

/// A keyframe harvested into the database: its encoding, the pose of the
/// camera in the owning reference frame at harvest time, and the
/// downsampled view itself.
#[derive(Clone, Debug)]
pub struct KeyframeEntry {
    pub encoding: FernEncoding,
    pub pose: RigidTransform,
    pub snapshot: FernSnapshot,
    pub camera_id: u32,
    pub time: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AddOutcome {
    Added(u32),
    /// The view resembles a stored keyframe too closely to be worth keeping.
    TooSimilar { nearest: u32, dissimilarity: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub entry: u32,
    pub dissimilarity: f64,
}

/// Keyframe store with an inverted index from (fern, code) to entry ids.
/// One owner mutates it; queries take shared references.
#[derive(Clone, Debug)]
pub struct FernDatabase {
    spec: FernSpec,
    t_add: f64,
    t_match: f64,
    entries: Vec<KeyframeEntry>,
    index: Vec<[Vec<u32>; 16]>,
}

impl FernDatabase {
    pub fn new(spec: FernSpec) -> Self {
        Self::with_thresholds(spec, DEFAULT_T_ADD, DEFAULT_T_MATCH)
    }

    pub fn with_thresholds(spec: FernSpec, t_add: f64, t_match: f64) -> Self {
        let index = vec![<[Vec<u32>; 16]>::default(); spec.num_ferns()];
        Self {
            spec,
            t_add,
            t_match,
            entries: Vec::new(),
            index,
        }
    }

    pub fn spec(&self) -> &FernSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u32) -> &KeyframeEntry {
        &self.entries[id as usize]
    }

    pub fn entries(&self) -> &[KeyframeEntry] {
        &self.entries
    }

    /// Harvests the view as a keyframe unless a stored entry is already
    /// within t_add dissimilarity of it.
    pub fn try_add_keyframe(
        &mut self,
        view: &FernSnapshot,
        pose: &RigidTransform,
        camera_id: u32,
        time: u64,
    ) -> Result<AddOutcome, FernError> {
        let encoding = encode(view, &self.spec)?;
        self.try_add_encoded(encoding, view.clone(), pose, camera_id, time)
    }

    /// As try_add_keyframe with a precomputed encoding; the caller promises
    /// the encoding belongs to the snapshot.
    pub fn try_add_encoded(
        &mut self,
        encoding: FernEncoding,
        snapshot: FernSnapshot,
        pose: &RigidTransform,
        camera_id: u32,
        time: u64,
    ) -> Result<AddOutcome, FernError> {
        if encoding.fingerprint != self.spec.fingerprint {
            return Err(FernError::SpecMismatch);
        }
        if let Some((nearest, d)) = self.nearest(&encoding) {
            if d <= self.t_add {
                return Ok(AddOutcome::TooSimilar {
                    nearest,
                    dissimilarity: d,
                });
            }
        }
        let id = self.entries.len() as u32;
        for (f, &code) in encoding.codes.iter().enumerate() {
            self.index[f][code as usize].push(id);
        }
        self.entries.push(KeyframeEntry {
            encoding,
            pose: *pose,
            snapshot,
            camera_id,
            time,
        });
        Ok(AddOutcome::Added(id))
    }

    /// Concatenates another database built on the same spec, transforming
    /// every stored pose by `transform`. Bypasses the novelty gate: a merge
    /// must keep all keyframes from both maps, duplicates included. Returns
    /// the number of entries absorbed.
    pub fn absorb(
        &mut self,
        other: FernDatabase,
        transform: &RigidTransform,
    ) -> Result<usize, FernError> {
        if other.spec.fingerprint() != self.spec.fingerprint() {
            return Err(FernError::SpecMismatch);
        }
        let absorbed = other.entries.len();
        for mut entry in other.entries {
            entry.pose = transform.compose(&entry.pose);
            let id = self.entries.len() as u32;
            for (f, &code) in entry.encoding.codes.iter().enumerate() {
                self.index[f][code as usize].push(id);
            }
            self.entries.push(entry);
        }
        Ok(absorbed)
    }

    /// Returns the nearest stored keyframe if its dissimilarity is below
    /// t_match; ties break toward the lowest entry id.
    pub fn find_match(&self, view: &FernSnapshot) -> Result<Option<MatchResult>, FernError> {
        let encoding = encode(view, &self.spec)?;
        self.find_match_encoded(&encoding)
    }

    pub fn find_match_encoded(
        &self,
        encoding: &FernEncoding,
    ) -> Result<Option<MatchResult>, FernError> {
        if encoding.fingerprint != self.spec.fingerprint {
            return Err(FernError::SpecMismatch);
        }
        Ok(self.nearest(encoding).and_then(|(entry, d)| {
            (d < self.t_match).then_some(MatchResult {
                entry,
                dissimilarity: d,
            })
        }))
    }

    /// Nearest entry by dissimilarity. Agreement counts come from the
    /// inverted index, so dissimilarity is (N - agreements) / N without
    /// touching the stored encodings; the strict-less fold makes ties
    /// resolve to the lowest id.
    fn nearest(&self, encoding: &FernEncoding) -> Option<(u32, f64)> {
        if self.entries.is_empty() {
            return None;
        }
        let mut agreements = vec![0u32; self.entries.len()];
        for (f, &code) in encoding.codes.iter().enumerate() {
            for &id in &self.index[f][code as usize] {
                agreements[id as usize] += 1;
            }
        }
        let n = self.spec.num_ferns() as f64;
        let mut best = (0u32, f64::INFINITY);
        for (id, &a) in agreements.iter().enumerate() {
            let d = (n - a as f64) / n;
            if d < best.1 {
                best = (id as u32, d);
            }
        }
        Some(best)
    }

    /// The inverted index must always equal one rebuilt from the entries.
    pub fn index_is_consistent(&self) -> bool {
        let mut rebuilt = vec![<[Vec<u32>; 16]>::default(); self.spec.num_ferns()];
        for (id, entry) in self.entries.iter().enumerate() {
            for (f, &code) in entry.encoding.codes.iter().enumerate() {
                rebuilt[f][code as usize].push(id as u32);
            }
        }
        rebuilt == self.index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn uniform_snapshot(w: usize, h: usize, color: [u8; 3], depth: f32) -> FernSnapshot {
        FernSnapshot::new(Grid::filled(w, h, color), Grid::filled(w, h, depth))
    }

    fn default_spec(seed: u64) -> FernSpec {
        FernSpec::generate(
            DEFAULT_NUM_FERNS,
            DEFAULT_FERN_WIDTH,
            DEFAULT_FERN_HEIGHT,
            seed,
        )
    }

    /// Two ferns over a 2x2 view with hand-picked thresholds; codes verified
    /// by evaluating each test by hand.
    fn handcrafted_spec() -> FernSpec {
        let t = |x, y, channel, threshold| FernTest {
            x,
            y,
            channel,
            threshold,
        };
        FernSpec::from_tests(
            2,
            2,
            vec![
                Fern {
                    tests: [
                        t(0, 0, Channel::R, 150.0),
                        t(1, 0, Channel::D, 0.5),
                        t(0, 1, Channel::G, 90.0),
                        t(1, 1, Channel::B, 200.0),
                    ],
                },
                Fern {
                    tests: [
                        t(1, 1, Channel::R, 255.0),
                        t(0, 1, Channel::D, 3.5),
                        t(0, 0, Channel::B, 51.0),
                        t(1, 0, Channel::G, 255.0),
                    ],
                },
            ],
        )
    }

    fn fixture_2x2() -> FernSnapshot {
        let color = Grid::from_vec(
            2,
            2,
            vec![[200, 10, 50], [0, 255, 30], [90, 90, 90], [255, 0, 255]],
        );
        let depth = Grid::from_vec(2, 2, vec![1.0, 0.0, 3.5, 2.0]);
        FernSnapshot::new(color, depth)
    }

    #[test]
    fn generation_is_seed_deterministic_and_in_bounds() {
        let a = default_spec(42);
        let b = default_spec(42);
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a, default_spec(43));
        for fern in a.ferns() {
            for t in &fern.tests {
                assert!((t.x as usize) < DEFAULT_FERN_WIDTH);
                assert!((t.y as usize) < DEFAULT_FERN_HEIGHT);
                match t.channel {
                    Channel::D => {
                        assert!((DEPTH_THRESHOLD_MIN..=DEPTH_THRESHOLD_MAX)
                            .contains(&t.threshold))
                    }
                    _ => assert!((0.0..=255.0).contains(&t.threshold)),
                }
            }
        }
    }

    #[test]
    fn black_view_encodes_to_zero() {
        let spec = default_spec(7);
        // This seed draws no zero thresholds, so every test must emit 0.
        for fern in spec.ferns() {
            for t in &fern.tests {
                assert!(t.threshold > 0.0);
            }
        }
        let black = uniform_snapshot(DEFAULT_FERN_WIDTH, DEFAULT_FERN_HEIGHT, [0; 3], 0.0);
        let enc = encode(&black, &spec).unwrap();
        assert!(enc.codes().iter().all(|&c| c == 0));
        assert_eq!(encode(&black, &spec).unwrap(), enc);
    }

    #[test]
    fn handcrafted_codes_match_hand_computation() {
        // Fern 0: 200>=150, invalid depth < 0.5, 90>=90, 255>=200 -> 0b1101.
        // Fern 1: 255>=255, 3.5>=3.5, 50<51, 255>=255 -> 0b1011.
        let enc = encode(&fixture_2x2(), &handcrafted_spec()).unwrap();
        assert_eq!(enc.codes(), &[0b1101, 0b1011]);
    }

    #[test]
    fn encode_rejects_resolution_mismatch() {
        let spec = handcrafted_spec();
        let wrong = uniform_snapshot(3, 2, [0; 3], 0.0);
        assert!(matches!(
            encode(&wrong, &spec),
            Err(FernError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn dissimilarity_counts_differing_blocks() {
        let spec = FernSpec::generate(8, 4, 4, 1);
        let a = FernEncoding::from_codes(vec![3; 8], &spec);
        assert_eq!(dissimilarity(&a, &a).unwrap(), 0.0);
        let mut two = vec![3; 8];
        two[2] = 5;
        two[6] = 9;
        let b = FernEncoding::from_codes(two, &spec);
        assert_abs_diff_eq!(dissimilarity(&a, &b).unwrap(), 0.25);
        let all = FernEncoding::from_codes(vec![4; 8], &spec);
        assert_eq!(dissimilarity(&a, &all).unwrap(), 1.0);
    }

    #[test]
    fn dissimilarity_rejects_spec_mismatch() {
        let a = FernEncoding::from_codes(vec![0; 8], &FernSpec::generate(8, 4, 4, 1));
        let b = FernEncoding::from_codes(vec![0; 8], &FernSpec::generate(8, 4, 4, 2));
        assert!(matches!(dissimilarity(&a, &b), Err(FernError::SpecMismatch)));
    }

    #[test]
    fn harvesting_respects_the_add_threshold() {
        let spec = default_spec(7);
        let mut db = FernDatabase::new(spec.clone());
        let view = uniform_snapshot(DEFAULT_FERN_WIDTH, DEFAULT_FERN_HEIGHT, [120, 40, 40], 1.5);
        let pose = RigidTransform::identity();

        let first = db.try_add_keyframe(&view, &pose, 0, 10).unwrap();
        assert_eq!(first, AddOutcome::Added(0));
        assert_eq!(
            db.try_add_keyframe(&view, &pose, 0, 11).unwrap(),
            AddOutcome::TooSimilar {
                nearest: 0,
                dissimilarity: 0.0
            }
        );

        // Exactly t_add * N flipped codes sit on the boundary and must be
        // rejected by the strict comparison; one more flip clears it.
        let base = encode(&view, &spec).unwrap();
        let boundary = (DEFAULT_T_ADD * DEFAULT_NUM_FERNS as f64) as usize;
        let mut flipped = base.codes().to_vec();
        for c in flipped.iter_mut().take(boundary) {
            *c ^= 0x1;
        }
        let enc = FernEncoding::from_codes(flipped.clone(), &spec);
        assert_eq!(
            db.try_add_encoded(enc, view.clone(), &pose, 0, 12).unwrap(),
            AddOutcome::TooSimilar {
                nearest: 0,
                dissimilarity: DEFAULT_T_ADD
            }
        );
        flipped[boundary] ^= 0x1;
        let enc = FernEncoding::from_codes(flipped, &spec);
        assert_eq!(
            db.try_add_encoded(enc, view.clone(), &pose, 0, 13).unwrap(),
            AddOutcome::Added(1)
        );
        assert!(db.index_is_consistent());
    }

    #[test]
    fn matching_respects_the_match_threshold() {
        let spec = default_spec(7);
        let mut db = FernDatabase::new(spec.clone());
        assert!(db
            .find_match(&uniform_snapshot(
                DEFAULT_FERN_WIDTH,
                DEFAULT_FERN_HEIGHT,
                [0; 3],
                0.0
            ))
            .unwrap()
            .is_none());

        let view = uniform_snapshot(DEFAULT_FERN_WIDTH, DEFAULT_FERN_HEIGHT, [200, 200, 60], 2.5);
        db.try_add_keyframe(&view, &RigidTransform::identity(), 1, 5)
            .unwrap();
        let hit = db.find_match(&view).unwrap().unwrap();
        assert_eq!(hit.entry, 0);
        assert_eq!(hit.dissimilarity, 0.0);
        assert_eq!(db.entry(hit.entry).camera_id, 1);

        // 40% of the ferns flipped is far beyond t_match.
        let mut codes = encode(&view, &spec).unwrap().codes().to_vec();
        for c in codes.iter_mut().take(2 * DEFAULT_NUM_FERNS / 5) {
            *c ^= 0x2;
        }
        let far = FernEncoding::from_codes(codes, &spec);
        assert!(db.find_match_encoded(&far).unwrap().is_none());
    }

    #[test]
    fn match_ties_break_to_the_lowest_id() {
        let spec = FernSpec::generate(4, 4, 4, 9);
        let mut db = FernDatabase::with_thresholds(spec.clone(), 0.1, 0.3);
        let snap = uniform_snapshot(4, 4, [0; 3], 0.0);
        let pose = RigidTransform::identity();
        let e0 = FernEncoding::from_codes(vec![1, 1, 2, 2], &spec);
        let e1 = FernEncoding::from_codes(vec![1, 1, 3, 3], &spec);
        db.try_add_encoded(e0, snap.clone(), &pose, 0, 0).unwrap();
        db.try_add_encoded(e1, snap.clone(), &pose, 0, 1).unwrap();
        // Equidistant from both entries at 0.25.
        let q = FernEncoding::from_codes(vec![1, 1, 2, 3], &spec);
        let hit = db.find_match_encoded(&q).unwrap().unwrap();
        assert_eq!(hit.entry, 0);
        assert_abs_diff_eq!(hit.dissimilarity, 0.25);
    }

    #[test]
    fn noise_below_threshold_margins_does_not_change_the_encoding() {
        // All thresholds sit 50 gray levels / 1 m away from the base values,
        // so +-10 levels and +-0.2 m of noise cannot flip any test.
        let t = |x, y, channel, threshold| FernTest {
            x,
            y,
            channel,
            threshold,
        };
        let spec = FernSpec::from_tests(
            4,
            4,
            vec![
                Fern {
                    tests: [
                        t(0, 0, Channel::R, 100.0),
                        t(1, 1, Channel::G, 100.0),
                        t(2, 2, Channel::B, 100.0),
                        t(3, 3, Channel::D, 2.0),
                    ],
                },
                Fern {
                    tests: [
                        t(3, 0, Channel::R, 100.0),
                        t(0, 3, Channel::G, 100.0),
                        t(2, 1, Channel::B, 100.0),
                        t(1, 2, Channel::D, 2.0),
                    ],
                },
            ],
        );
        let base = uniform_snapshot(4, 4, [150, 50, 150], 1.0);
        let mut noisy = base.clone();
        for (i, c) in noisy.color.data_mut().iter_mut().enumerate() {
            let delta = if i % 2 == 0 { 10i16 } else { -10 };
            for ch in c.iter_mut() {
                *ch = (*ch as i16 + delta) as u8;
            }
        }
        for (i, d) in noisy.depth.data_mut().iter_mut().enumerate() {
            *d += if i % 2 == 0 { 0.2 } else { -0.2 };
        }
        let ea = encode(&base, &spec).unwrap();
        let eb = encode(&noisy, &spec).unwrap();
        assert_eq!(dissimilarity(&ea, &eb).unwrap(), 0.0);
    }

    #[test]
    fn downsample_averages_color_and_takes_lower_median_depth() {
        let mut color = Grid::filled(4, 4, [0u8; 3]);
        let mut depth = Grid::filled(4, 4, 0.0f32);
        // Top-left 2x2 block: colors average to 25, depths {2.0, 4.0}.
        color.set(0, 0, [10, 0, 0]);
        color.set(1, 0, [20, 0, 0]);
        color.set(0, 1, [30, 0, 0]);
        color.set(1, 1, [40, 0, 0]);
        depth.set(1, 0, 2.0);
        depth.set(0, 1, 4.0);
        let snap = FernSnapshot::downsample_from(&color, &depth, 2, 2);
        assert_eq!(snap.color.get(0, 0), [25, 0, 0]);
        assert_eq!(snap.depth.get(0, 0), 2.0);
        // Bottom-right block is all-invalid depth.
        assert_eq!(snap.depth.get(1, 1), 0.0);
    }

    #[test]
    fn absorb_concatenates_without_dedup_and_transforms_poses() {
        let spec = default_spec(3);
        let view = uniform_snapshot(
            DEFAULT_FERN_WIDTH,
            DEFAULT_FERN_HEIGHT,
            [120, 60, 200],
            1.5,
        );
        let mut a = FernDatabase::new(spec.clone());
        a.try_add_keyframe(&view, &RigidTransform::identity(), 0, 3)
            .unwrap();
        let mut b = FernDatabase::new(spec.clone());
        // Identical content: try_add would refuse it, absorb must keep it.
        b.try_add_keyframe(&view, &RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)), 1, 7)
            .unwrap();

        let t = RigidTransform::from_translation(Vector3::new(0.0, 2.0, 0.0));
        assert_eq!(a.absorb(b, &t).unwrap(), 1);
        assert_eq!(a.len(), 2);
        assert_eq!(a.entry(1).camera_id, 1);
        assert_eq!(
            a.entry(1).pose.translation(),
            &Vector3::new(1.0, 2.0, 0.0)
        );
        assert!(a.index_is_consistent());

        let other_spec = default_spec(4);
        let c = FernDatabase::new(other_spec);
        assert!(matches!(
            a.absorb(c, &t),
            Err(FernError::SpecMismatch)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dissimilarity_is_a_pseudometric(
            a in proptest::collection::vec(0u8..16, 32),
            b in proptest::collection::vec(0u8..16, 32),
            c in proptest::collection::vec(0u8..16, 32),
        ) {
            let spec = FernSpec::generate(32, 8, 8, 5);
            let ea = FernEncoding::from_codes(a, &spec);
            let eb = FernEncoding::from_codes(b, &spec);
            let ec = FernEncoding::from_codes(c, &spec);
            let dab = dissimilarity(&ea, &eb).unwrap();
            let dba = dissimilarity(&eb, &ea).unwrap();
            let dac = dissimilarity(&ea, &ec).unwrap();
            let dbc = dissimilarity(&eb, &ec).unwrap();
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(dissimilarity(&ea, &ea).unwrap(), 0.0);
            prop_assert!((0.0..=1.0).contains(&dab));
            prop_assert!(dac <= dab + dbc + 1e-12);
        }

        #[test]
        fn index_lookup_equals_linear_scan(
            entries in proptest::collection::vec(
                proptest::collection::vec(0u8..16, 16), 0..120),
            query in proptest::collection::vec(0u8..16, 16),
        ) {
            let spec = FernSpec::generate(16, 4, 4, 11);
            // t_add below zero forces every entry in, duplicates included.
            let mut db = FernDatabase::with_thresholds(spec.clone(), -1.0, 0.7);
            let snap = uniform_snapshot(4, 4, [0; 3], 0.0);
            let pose = RigidTransform::identity();
            for codes in entries {
                let enc = FernEncoding::from_codes(codes, &spec);
                let added = db.try_add_encoded(enc, snap.clone(), &pose, 0, 0).unwrap();
                prop_assert!(matches!(added, AddOutcome::Added(_)));
            }
            prop_assert!(db.index_is_consistent());

            let q = FernEncoding::from_codes(query, &spec);
            let mut oracle: Option<MatchResult> = None;
            for (id, entry) in db.entries().iter().enumerate() {
                let d = dissimilarity(&q, &entry.encoding).unwrap();
                if oracle.is_none_or(|o| d < o.dissimilarity) {
                    oracle = Some(MatchResult { entry: id as u32, dissimilarity: d });
                }
            }
            let oracle = oracle.filter(|o| o.dissimilarity < 0.7);
            prop_assert_eq!(db.find_match_encoded(&q).unwrap(), oracle);
        }
    }
}
