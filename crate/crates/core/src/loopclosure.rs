//! Loop closure: deformation-graph map correction for global and local
//! intra-map closures, and inter-map closure with map merging.
//!
//! The deformation graph is an embedded-deformation model: nodes sampled
//! from the map each hold an affine (A, b) anchored at a position g, and
//! every surfel moves with a normalized blend of its influence nodes.
//! Surface constraints from a registered loop pull the graph into shape
//! through Gauss-Newton over all node parameters.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::collab::ReferenceFrame;
use crate::fern::{encode, FernSnapshot};
use crate::frame::{build_pyramid_from_parts, FramePyramid, PyramidLevel};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::odometry::{
    check_constrained, model_pyramid, track, Acceptance, CheckConfig, TrackConfig,
};
use crate::surfelmap::{Region, Stability, SurfelMap};

/// One deformation node per this many stable surfels.
pub const DEFAULT_NODE_RATE: usize = 500;
/// Temporal connectivity of the graph (regularization edges per node).
pub const K_CONN: usize = 4;
/// Nodes blended into each surfel's deformation.
pub const K_INFLUENCE: usize = 4;
/// The temporal shortlist holds this multiple of K_INFLUENCE candidates.
pub const SHORTLIST_FACTOR: usize = 4;

/// A node's A falls back to its rotation polar factor below this |det|.
const SINGULAR_DET: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfluenceMode {
    /// Shortlist temporally, then keep the spatially nearest (paper-faithful;
    /// unsound when another camera mapped the region at a distant time).
    TemporalSpatial,
    /// Skip the temporal shortlist and use all nodes.
    SpatialOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNode {
    /// Node position: the sampled surfel's position, fixed during
    /// optimization.
    pub g: Vector3<f64>,
    /// Affine part, identity before every optimization.
    pub a: Matrix3<f64>,
    /// Translation part, meters.
    pub b: Vector3<f64>,
    /// init_time of the source surfel.
    pub timestamp: u64,
    /// Temporally adjacent node ids; symmetric.
    pub neighbors: Vec<u32>,
}

impl DeformationNode {
    pub fn at(g: Vector3<f64>, timestamp: u64) -> Self {
        Self {
            g,
            a: Matrix3::identity(),
            b: Vector3::zeros(),
            timestamp,
            neighbors: Vec::new(),
        }
    }
}

/// Pulls the deformation of `source` onto `destination`.
#[derive(Clone, Copy, Debug)]
pub struct SurfaceConstraint {
    pub source: Vector3<f64>,
    pub destination: Vector3<f64>,
    /// init_time neighborhood used for the source point's influence region.
    pub timestamp: u64,
}

/// An accepted inter-map loop closure: absorb reference frame `absorbed`
/// into `surviving` by `transform` (absorbed-frame coordinates into
/// surviving-frame coordinates). Only validated closures become events.
#[derive(Clone, Copy, Debug)]
pub struct MergeEvent {
    pub absorbed: u32,
    pub surviving: u32,
    pub transform: RigidTransform,
    pub camera: u32,
    pub timestep: u64,
    pub fern_dissimilarity: f64,
    pub final_error: f64,
    pub inliers: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizeParams {
    pub w_rot: f64,
    pub w_reg: f64,
    pub w_con: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            w_rot: 1.0,
            w_reg: 10.0,
            w_con: 100.0,
            max_iters: 20,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeOutcome {
    pub converged: bool,
    pub final_cost: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGraph {
    nodes: Vec<DeformationNode>,
    influence_mode: InfluenceMode,
}

impl Default for DeformationGraph {
    fn default() -> Self {
        Self::empty()
    }
}

impl DeformationGraph {
    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            influence_mode: InfluenceMode::TemporalSpatial,
        }
    }

    /// Builds a graph from explicit nodes, keeping their neighbor lists.
    pub fn from_nodes(nodes: Vec<DeformationNode>) -> Self {
        Self {
            nodes,
            influence_mode: InfluenceMode::TemporalSpatial,
        }
    }

    /// Systematic sampling: every `rate`-th stable surfel in ascending
    /// init_time order becomes a node. Maps with fewer than K_CONN + 1
    /// stable surfels yield an empty graph (deformation disabled).
    pub fn sample_from_map(map: &SurfelMap, rate: usize) -> Self {
        assert!(rate > 0);
        let mut stable: Vec<(u64, usize)> = map
            .surfels()
            .iter()
            .enumerate()
            .filter(|(_, s)| map.is_stable(s))
            .map(|(i, s)| (s.init_time, i))
            .collect();
        if stable.len() < K_CONN + 1 {
            return Self::empty();
        }
        stable.sort_unstable();
        let nodes = stable
            .iter()
            .step_by(rate)
            .map(|&(t, i)| DeformationNode::at(map.surfels()[i].position, t))
            .collect();
        let mut graph = Self::from_nodes(nodes);
        graph.rebuild_neighbors();
        graph
    }

    pub fn nodes(&self) -> &[DeformationNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn influence_mode(&self) -> InfluenceMode {
        self.influence_mode
    }

    pub fn set_influence_mode(&mut self, mode: InfluenceMode) {
        self.influence_mode = mode;
    }

    /// Restores every node to the identity deformation.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.a = Matrix3::identity();
            n.b = Vector3::zeros();
        }
    }

    /// Each node connects to its K_CONN temporally nearest peers, then the
    /// relation is closed under symmetry.
    fn rebuild_neighbors(&mut self) {
        let n = self.nodes.len();
        let mut sets: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            let ti = self.nodes[i].timestamp;
            let mut others: Vec<u32> = (0..n as u32).filter(|&j| j != i as u32).collect();
            others.sort_unstable_by_key(|&j| {
                let tj = self.nodes[j as usize].timestamp;
                (tj.abs_diff(ti), (j as i64 - i as i64).unsigned_abs(), j)
            });
            for &j in others.iter().take(K_CONN) {
                if !sets[i].contains(&j) {
                    sets[i].push(j);
                }
                if !sets[j as usize].contains(&(i as u32)) {
                    sets[j as usize].push(i as u32);
                }
            }
        }
        for (node, mut set) in self.nodes.iter_mut().zip(sets) {
            set.sort_unstable();
            node.neighbors = set;
        }
    }

    /// Influence region of a point observed at `time`: shortlist the
    /// SHORTLIST_FACTOR * K_INFLUENCE temporally nearest nodes, keep the
    /// K_INFLUENCE spatially nearest, and weight by (1 - d / d_max)^2
    /// normalized to sum 1, with d_max the distance of the first excluded
    /// shortlisted node. With no excluded node, d_max doubles the farthest
    /// kept distance so every kept node keeps positive weight.
    pub fn influence(&self, p: &Vector3<f64>, time: u64) -> Vec<(u32, f64)> {
        assert!(!self.nodes.is_empty());
        let mut ids: Vec<u32> = (0..self.nodes.len() as u32).collect();
        if self.influence_mode == InfluenceMode::TemporalSpatial {
            let ck = SHORTLIST_FACTOR * K_INFLUENCE;
            if ids.len() > ck {
                ids.select_nth_unstable_by_key(ck, |&i| {
                    (self.nodes[i as usize].timestamp.abs_diff(time), i)
                });
                ids.truncate(ck);
            }
        }
        let dist = |i: u32| (self.nodes[i as usize].g - p).norm();
        ids.sort_unstable_by(|&i, &j| {
            dist(i).partial_cmp(&dist(j)).unwrap().then(i.cmp(&j))
        });
        let kept = K_INFLUENCE.min(ids.len());
        let d_max = if ids.len() > kept {
            dist(ids[kept])
        } else {
            2.0 * dist(ids[kept - 1])
        };
        let ids = &ids[..kept];
        if d_max <= 1e-12 {
            // Every candidate coincides with the point.
            return ids.iter().map(|&i| (i, 1.0 / kept as f64)).collect();
        }
        let raw: Vec<f64> = ids
            .iter()
            .map(|&i| {
                let w = 1.0 - dist(i) / d_max;
                w.max(0.0) * w.max(0.0)
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        if sum <= 1e-24 {
            return ids.iter().map(|&i| (i, 1.0 / kept as f64)).collect();
        }
        ids.iter().zip(raw).map(|(&i, w)| (i, w / sum)).collect()
    }

    /// Deformed position of a point observed at `time`. The correction is
    /// accumulated as a delta so an identity graph is an exact no-op.
    pub fn deform_point(&self, p: &Vector3<f64>, time: u64) -> Vector3<f64> {
        let mut delta = Vector3::zeros();
        for (id, w) in self.influence(p, time) {
            let n = &self.nodes[id as usize];
            delta += w * ((n.a - Matrix3::identity()) * (p - n.g) + n.b);
        }
        p + delta
    }

    /// Deformed pose: translation moves like a point, rotation composes
    /// with the polar factor of the blended node affine.
    pub fn deform_pose(&self, pose: &RigidTransform, time: u64) -> RigidTransform {
        let t = self.deform_point(pose.translation(), time);
        let mut dev = Matrix3::zeros();
        for (id, w) in self.influence(pose.translation(), time) {
            dev += w * (self.nodes[id as usize].a - Matrix3::identity());
        }
        let rot = if dev == Matrix3::zeros() {
            *pose.rotation()
        } else {
            polar_rotation(&(Matrix3::identity() + dev)) * pose.rotation()
        };
        RigidTransform::from_parts(rot, t)
    }

    /// Moves every surfel with its influence blend: positions through the
    /// node affines, normals through inverse-transposes (or the rotation
    /// polar factor where A is singular), renormalized.
    pub fn apply_to_map(&self, map: &mut SurfelMap) {
        if self.nodes.is_empty() {
            return;
        }
        for s in map.surfels_mut() {
            let region = self.influence(&s.position, s.init_time);
            let mut dp = Vector3::zeros();
            let mut dn = Vector3::zeros();
            for &(id, w) in &region {
                let n = &self.nodes[id as usize];
                dp += w * ((n.a - Matrix3::identity()) * (s.position - n.g) + n.b);
                dn += w * ((normal_transform(&n.a) - Matrix3::identity()) * s.normal);
            }
            s.position += dp;
            if dn != Vector3::zeros() {
                let n = s.normal + dn;
                s.normal = n / n.norm();
            }
        }
    }

    /// Gauss-Newton over all node parameters minimizing the weighted sum of
    /// w_rot * ||A^T A - I||_F^2, w_reg * edge residuals and w_con *
    /// constraint residuals. Nodes start from identity; three consecutive
    /// cost increases reject the deformation and reset the graph, leaving
    /// the map untouched.
    pub fn optimize(
        &mut self,
        constraints: &[SurfaceConstraint],
        params: &OptimizeParams,
    ) -> OptimizeOutcome {
        assert!(!self.nodes.is_empty(), "optimize needs a non-empty graph");
        assert!(!constraints.is_empty(), "optimize needs constraints");
        for c in constraints {
            assert!(
                c.source.iter().all(|v| v.is_finite())
                    && c.destination.iter().all(|v| v.is_finite()),
                "constraint coordinates must be finite"
            );
        }
        self.reset();
        // Influence regions depend only on node positions and timestamps,
        // both fixed during optimization; freeze them once.
        let regions: Vec<Vec<(u32, f64)>> = constraints
            .iter()
            .map(|c| self.influence(&c.source, c.timestamp))
            .collect();

        let dim = 12 * self.nodes.len();
        let mut prev_cost = self.cost(constraints, &regions, params);
        let mut cost = prev_cost;
        let mut streak = 0u32;
        let mut iterations = 0;
        for iter in 0..params.max_iters {
            iterations = iter + 1;
            let (mut h, b) = self.normal_equations(constraints, &regions, params, dim);
            for d in 0..dim {
                h[(d, d)] += 1e-9 * (1.0 + h[(d, d)].abs());
            }
            let Some(chol) = h.cholesky() else {
                self.reset();
                return OptimizeOutcome {
                    converged: false,
                    final_cost: prev_cost,
                    iterations,
                };
            };
            let delta = chol.solve(&b);
            for (n, node) in self.nodes.iter_mut().enumerate() {
                for c in 0..3 {
                    for r in 0..3 {
                        node.a[(r, c)] += delta[12 * n + 3 * c + r];
                    }
                }
                for i in 0..3 {
                    node.b[i] += delta[12 * n + 9 + i];
                }
            }
            cost = self.cost(constraints, &regions, params);
            if !cost.is_finite() {
                self.reset();
                return OptimizeOutcome {
                    converged: false,
                    final_cost: cost,
                    iterations,
                };
            }
            if cost > prev_cost + 1e-12 + 1e-9 * prev_cost {
                streak += 1;
                if streak >= 3 {
                    self.reset();
                    return OptimizeOutcome {
                        converged: false,
                        final_cost: cost,
                        iterations,
                    };
                }
            } else {
                streak = 0;
            }
            let rel = (cost - prev_cost).abs() / prev_cost.max(1e-12);
            prev_cost = cost;
            if rel < params.rel_tol {
                break;
            }
        }
        OptimizeOutcome {
            converged: true,
            final_cost: cost,
            iterations,
        }
    }

    fn cost(
        &self,
        constraints: &[SurfaceConstraint],
        regions: &[Vec<(u32, f64)>],
        params: &OptimizeParams,
    ) -> f64 {
        let mut total = 0.0;
        for node in &self.nodes {
            let m = node.a.transpose() * node.a - Matrix3::identity();
            total += params.w_rot * m.norm_squared();
        }
        for node in &self.nodes {
            for &m in &node.neighbors {
                let other = &self.nodes[m as usize];
                let r = node.a * (other.g - node.g) + node.g + node.b - other.g - other.b;
                total += params.w_reg * r.norm_squared();
            }
        }
        for (c, region) in constraints.iter().zip(regions) {
            let r = self.constraint_residual(c, region);
            total += params.w_con * r.norm_squared();
        }
        total
    }

    /// phi(source) - destination under the frozen influence region.
    fn constraint_residual(
        &self,
        c: &SurfaceConstraint,
        region: &[(u32, f64)],
    ) -> Vector3<f64> {
        let mut delta = Vector3::zeros();
        for &(id, w) in region {
            let n = &self.nodes[id as usize];
            delta += w * ((n.a - Matrix3::identity()) * (c.source - n.g) + n.b);
        }
        c.source + delta - c.destination
    }

    fn normal_equations(
        &self,
        constraints: &[SurfaceConstraint],
        regions: &[Vec<(u32, f64)>],
        params: &OptimizeParams,
        dim: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let a_idx = |n: usize, r: usize, c: usize| 12 * n + 3 * c + r;
        let b_idx = |n: usize, i: usize| 12 * n + 9 + i;
        let add = |h: &mut DMatrix<f64>,
                   b: &mut DVector<f64>,
                   w: f64,
                   r: f64,
                   entries: &[(usize, f64)]| {
            for &(i, vi) in entries {
                b[i] -= w * r * vi;
                for &(j, vj) in entries {
                    h[(i, j)] += w * vi * vj;
                }
            }
        };

        // d(A^T A - I)_{ij} / dA_{kl} = [l == j] A_{ki} + [l == i] A_{kj}.
        for (n, node) in self.nodes.iter().enumerate() {
            let m = node.a.transpose() * node.a - Matrix3::identity();
            let mut entries = Vec::with_capacity(6);
            for i in 0..3 {
                for j in 0..3 {
                    entries.clear();
                    for k in 0..3 {
                        if i == j {
                            entries.push((a_idx(n, k, i), 2.0 * node.a[(k, i)]));
                        } else {
                            entries.push((a_idx(n, k, j), node.a[(k, i)]));
                            entries.push((a_idx(n, k, i), node.a[(k, j)]));
                        }
                    }
                    add(&mut h, &mut b, params.w_rot, m[(i, j)], &entries);
                }
            }
        }

        for (n, node) in self.nodes.iter().enumerate() {
            for &mid in &node.neighbors {
                let other = &self.nodes[mid as usize];
                let d = other.g - node.g;
                let r = node.a * d + node.g + node.b - other.g - other.b;
                for i in 0..3 {
                    let entries = [
                        (a_idx(n, i, 0), d[0]),
                        (a_idx(n, i, 1), d[1]),
                        (a_idx(n, i, 2), d[2]),
                        (b_idx(n, i), 1.0),
                        (b_idx(mid as usize, i), -1.0),
                    ];
                    add(&mut h, &mut b, params.w_reg, r[i], &entries);
                }
            }
        }

        let mut entries = Vec::new();
        for (c, region) in constraints.iter().zip(regions) {
            let r = self.constraint_residual(c, region);
            for i in 0..3 {
                entries.clear();
                for &(id, w) in region {
                    let n = id as usize;
                    let s = c.source - self.nodes[n].g;
                    entries.push((a_idx(n, i, 0), w * s[0]));
                    entries.push((a_idx(n, i, 1), w * s[1]));
                    entries.push((a_idx(n, i, 2), w * s[2]));
                    entries.push((b_idx(n, i), w));
                }
                add(&mut h, &mut b, params.w_con, r[i], &entries);
            }
        }
        (h, b)
    }
}

/// Transform applied to normals for a node affine A: A^{-T}, or the polar
/// rotation factor when A is numerically singular.
fn normal_transform(a: &Matrix3<f64>) -> Matrix3<f64> {
    if a.determinant().abs() < SINGULAR_DET {
        polar_rotation(a)
    } else {
        a.try_inverse().map_or_else(|| polar_rotation(a), |inv| inv.transpose())
    }
}

/// Closest rotation to `a` (special orthogonal polar factor via SVD).
fn polar_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let mut u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    if (u * v_t).determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    u * v_t
}

/// Constraint pairs subsampled from an accepted registration.
pub const DEFAULT_CONSTRAINT_SAMPLES: usize = 128;

/// Everything the closure operations need from the session configuration.
#[derive(Clone, Debug)]
pub struct ClosureParams {
    pub track: TrackConfig,
    /// Base acceptance thresholds; n_min rescaled per working resolution.
    pub check: CheckConfig,
    pub optimize: OptimizeParams,
    pub node_rate: usize,
    pub constraint_samples: usize,
    pub influence: InfluenceMode,
}

impl Default for ClosureParams {
    fn default() -> Self {
        Self {
            track: TrackConfig::default(),
            check: CheckConfig::default(),
            optimize: OptimizeParams::default(),
            node_rate: DEFAULT_NODE_RATE,
            constraint_samples: DEFAULT_CONSTRAINT_SAMPLES,
            influence: InfluenceMode::TemporalSpatial,
        }
    }
}

/// Result of an accepted intra-map loop closure.
#[derive(Clone, Copy, Debug)]
pub struct AppliedClosure {
    /// Corrected camera pose.
    pub pose: RigidTransform,
    /// Matched fern entry for a global closure; None for local.
    pub matched_entry: Option<u32>,
    pub constraints: usize,
    pub final_cost: f64,
    /// Inactive surfels pulled back into the camera's active region (local
    /// closures only).
    pub reactivated: usize,
}

/// Uniformly subsamples surface constraints from the valid vertices of a
/// registered view: each sampled camera-space point v yields the pair
/// (from * v) -> (to * v) stamped with `time`.
fn sample_constraints(
    level: &PyramidLevel,
    from: &RigidTransform,
    to: &RigidTransform,
    time: u64,
    samples: usize,
) -> Vec<SurfaceConstraint> {
    let mut points = Vec::new();
    for y in 0..level.depth.height() {
        for x in 0..level.depth.width() {
            if let Some(v) = level.vertex_at(x, y) {
                points.push(v);
            }
        }
    }
    let stride = (points.len() / samples.max(1)).max(1);
    points
        .iter()
        .step_by(stride)
        .take(samples)
        .map(|v| SurfaceConstraint {
            source: from.transform_point(v),
            destination: to.transform_point(v),
            timestamp: time,
        })
        .collect()
}

/// Builds a tracking pyramid for a fern-resolution snapshot, scaling the
/// owning camera's intrinsics down to the snapshot size.
fn snapshot_pyramid(snapshot: &FernSnapshot, camera_k: &Intrinsics) -> FramePyramid {
    let k = camera_k.scaled_to(snapshot.width(), snapshot.height());
    build_pyramid_from_parts(&snapshot.color, &snapshot.depth, k)
}

/// Samples a fresh graph, optimizes it against the constraints and, only on
/// convergence, deforms the map, the stored trajectories and the member
/// camera poses. The triggering camera instead adopts `corrected`, the pose
/// the registration produced. Returns None with every byte of the map
/// untouched when the graph is degenerate or optimization is rejected.
fn optimize_and_apply(
    rf: &mut ReferenceFrame,
    constraints: &[SurfaceConstraint],
    trigger: u32,
    corrected: &RigidTransform,
    params: &ClosureParams,
) -> Option<OptimizeOutcome> {
    if constraints.is_empty() {
        return None;
    }
    let mut graph = DeformationGraph::sample_from_map(&rf.map, params.node_rate);
    graph.set_influence_mode(params.influence);
    if graph.is_empty() {
        return None;
    }
    let outcome = graph.optimize(constraints, &params.optimize);
    if !outcome.converged {
        return None;
    }
    graph.apply_to_map(&mut rf.map);
    for (&camera, state) in rf.cameras.iter_mut() {
        for record in &mut state.trajectory {
            record.pose = graph.deform_pose(&record.pose, record.frame_index);
        }
        if camera == trigger {
            state.pose = *corrected;
        } else if let Some(last) = state.last_index {
            state.pose = graph.deform_pose(&state.pose, last);
        }
    }
    rf.graph = graph;
    Some(outcome)
}

/// Global loop closure: the predicted view is matched against the frame's
/// own fern database; an accepted registration against the matched keyframe
/// yields surface constraints that deform the map onto its older self and a
/// corrected pose for the camera.
///
/// `predicted` is the fern-resolution downsample of the camera's stable-model
/// prediction at `pose`, the tracked pose of frame index `now`.
pub fn close_global_loop(
    rf: &mut ReferenceFrame,
    camera: u32,
    predicted: &FernSnapshot,
    pose: &RigidTransform,
    now: u64,
    params: &ClosureParams,
) -> Option<AppliedClosure> {
    let encoding = encode(predicted, rf.fern_db.spec()).ok()?;
    let matched = rf.fern_db.find_match_encoded(&encoding).ok()??;
    let camera_k = rf.cameras.get(&camera)?.intrinsics;

    let (keyframe_pose, model) = {
        let entry = rf.fern_db.entry(matched.entry);
        // A keyframe this camera harvested inside its own activity window is
        // the surface tracking already follows; deforming onto it would just
        // echo the tracker. Loop closures target reentry from outside.
        if entry.camera_id == camera && now.saturating_sub(entry.time) <= rf.map.delta_t() {
            return None;
        }
        let kf_k = rf.cameras.get(&entry.camera_id)?.intrinsics;
        (entry.pose, snapshot_pyramid(&entry.snapshot, &kf_k))
    };

    let live = snapshot_pyramid(predicted, &camera_k);
    let init = keyframe_pose.inverse().compose(pose);
    let result = track(&model, &live, &init, &params.track);
    let check = params.check.scaled_for(&live.finest().intrinsics);
    if check_constrained(&result, &check) != Acceptance::Accepted {
        return None;
    }
    let corrected = keyframe_pose.compose(&result.increment);

    let constraints = sample_constraints(
        live.finest(),
        pose,
        &corrected,
        now,
        params.constraint_samples,
    );
    let outcome = optimize_and_apply(rf, &constraints, camera, &corrected, params)?;
    Some(AppliedClosure {
        pose: corrected,
        matched_entry: Some(matched.entry),
        constraints: constraints.len(),
        final_cost: outcome.final_cost,
        reactivated: 0,
    })
}

/// Local loop closure: the camera's active and inactive model views are
/// rendered from the same pose and registered; on acceptance the active
/// surface is deformed onto the inactive one and the in-view inactive
/// surfels are reactivated for this camera.
pub fn close_local_loop(
    rf: &mut ReferenceFrame,
    camera: u32,
    pose: &RigidTransform,
    now: u64,
    params: &ClosureParams,
) -> Option<AppliedClosure> {
    let camera_k = rf.cameras.get(&camera)?.intrinsics;
    let check = params.check.scaled_for(&camera_k);
    let inactive = rf
        .map
        .predict_view(camera, pose, &camera_k, Region::Inactive, Stability::StableOnly)
        .ok()?;
    if inactive.valid_depth_count() < check.n_min {
        return None;
    }
    let active = rf
        .map
        .predict_view(camera, pose, &camera_k, Region::Active, Stability::StableOnly)
        .ok()?;
    if active.valid_depth_count() < check.n_min {
        return None;
    }

    let model = model_pyramid(&inactive);
    let live = model_pyramid(&active);
    let result = track(&model, &live, &RigidTransform::identity(), &params.track);
    if check_constrained(&result, &check) != Acceptance::Accepted {
        return None;
    }
    // The registration maps active-view coordinates into inactive-view
    // coordinates; the camera rides its active surface.
    let corrected = pose.compose(&result.increment);

    let constraints = sample_constraints(
        live.finest(),
        pose,
        &corrected,
        now,
        params.constraint_samples,
    );
    let outcome = optimize_and_apply(rf, &constraints, camera, &corrected, params)?;
    let reactivated = rf
        .map
        .reactivate_in_view(camera, &corrected, &camera_k, now)
        .ok()?;
    Some(AppliedClosure {
        pose: corrected,
        matched_entry: None,
        constraints: constraints.len(),
        final_cost: outcome.final_cost,
        reactivated,
    })
}

/// Which of two reference frames survives a merge: more surfels win, ties go
/// to the lower id.
fn survivor_of(a: &ReferenceFrame, b: &ReferenceFrame) -> u32 {
    match a.map.len().cmp(&b.map.len()) {
        std::cmp::Ordering::Greater => a.id,
        std::cmp::Ordering::Less => b.id,
        std::cmp::Ordering::Equal => a.id.min(b.id),
    }
}

/// Inter-map loop closure between the reference frame of `camera` and
/// another live frame. Reads both frames without mutating either.
///
/// The camera's fern-resolution predicted view is matched against the other
/// frame's database; a fern-resolution registration against the matched
/// keyframe gives the camera's pose estimate H in the other map, hence the
/// map-to-map initial estimate H * C^-1. The estimate is refined by
/// rendering the other map from it and registering the camera's real view
/// at full resolution, then validated; a validated transform becomes a
/// MergeEvent oriented by the survivor rule.
pub fn inter_map_closure(
    rf_own: &ReferenceFrame,
    rf_other: &ReferenceFrame,
    camera: u32,
    predicted: &FernSnapshot,
    live: &FramePyramid,
    timestep: u64,
    params: &ClosureParams,
) -> Option<MergeEvent> {
    assert_ne!(rf_own.id, rf_other.id, "inter-map closure needs two frames");
    let state = rf_own.cameras.get(&camera)?;
    let pose_own = state.pose;

    let encoding = encode(predicted, rf_other.fern_db.spec()).ok()?;
    let matched = rf_other.fern_db.find_match_encoded(&encoding).ok()??;
    let entry = rf_other.fern_db.entry(matched.entry);
    let kf_k = rf_other.cameras.get(&entry.camera_id)?.intrinsics;
    let model = snapshot_pyramid(&entry.snapshot, &kf_k);
    let live_fern = snapshot_pyramid(predicted, &state.intrinsics);
    let coarse = track(&model, &live_fern, &RigidTransform::identity(), &params.track);
    if !coarse.converged {
        return None;
    }
    // The camera's pose in the other map per the fern alignment, and from it
    // the map-to-map initial estimate.
    let fern_pose = entry.pose.compose(&coarse.increment);
    let estimate = fern_pose.compose(&pose_own.inverse());

    let pose_in_other = estimate.compose(&pose_own);
    let view = rf_other
        .map
        .predict_view(
            camera,
            &pose_in_other,
            &state.intrinsics,
            Region::All,
            Stability::StableOnly,
        )
        .ok()?;
    let refined = track(
        &model_pyramid(&view),
        live,
        &RigidTransform::identity(),
        &params.track,
    );
    let check = params.check.scaled_for(&state.intrinsics);
    if check_constrained(&refined, &check) != Acceptance::Accepted {
        return None;
    }
    let refined_pose = pose_in_other.compose(&refined.increment);
    let own_to_other = refined_pose.compose(&pose_own.inverse());

    let surviving = survivor_of(rf_own, rf_other);
    let (absorbed, transform) = if surviving == rf_other.id {
        (rf_own.id, own_to_other)
    } else {
        (rf_other.id, own_to_other.inverse())
    };
    Some(MergeEvent {
        absorbed,
        surviving,
        transform,
        camera,
        timestep,
        fern_dissimilarity: matched.dissimilarity,
        final_error: refined.final_error,
        inliers: refined.inlier_count,
    })
}

/// Merges the absorbed reference frame into the survivor: the absorbed map,
/// camera poses, trajectories and fern keyframe poses are carried through
/// the event transform and concatenated. Camera slots are session-wide, so
/// surfel last_seen arrays move unchanged. Consuming the absorbed frame by
/// value makes the merge atomic: there is no partially-merged state to
/// observe.
pub fn merge_maps(
    absorbed: ReferenceFrame,
    survivor: &mut ReferenceFrame,
    event: &MergeEvent,
    params: &ClosureParams,
) {
    assert_eq!(absorbed.id, event.absorbed, "event names the absorbed frame");
    assert_eq!(survivor.id, event.surviving, "event names the survivor");
    let t = event.transform;
    let ReferenceFrame {
        map: mut absorbed_map,
        cameras,
        fern_db,
        timestep,
        ..
    } = absorbed;

    absorbed_map.apply_transform(&t);
    survivor.map.absorb(absorbed_map);
    for (camera, mut state) in cameras {
        state.pose = t.compose(&state.pose);
        for record in &mut state.trajectory {
            record.pose = t.compose(&record.pose);
        }
        let previous = survivor.cameras.insert(camera, state);
        assert!(previous.is_none(), "camera sets of live frames are disjoint");
    }
    survivor
        .fern_db
        .absorb(fern_db, &t)
        .expect("all session databases share one fern spec");
    survivor.timestep = survivor.timestep.max(timestep);
    let mut graph = DeformationGraph::sample_from_map(&survivor.map, params.node_rate);
    graph.set_influence_mode(params.influence);
    survivor.graph = graph;
}
