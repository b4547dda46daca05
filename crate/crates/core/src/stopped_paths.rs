//! Stopped paths `(t, ω_t)` sampled on a time grid.
//!
//! A [`StoppedPath`] stores the node values `ω(u_0), …, ω(u_j)` of a
//! piecewise-linear path frozen at `t = u_j`. Evaluation past the stop time
//! returns the frozen value, so the type can never leak information beyond
//! `t` to a [`PathFunctional`].
//!
//! Vertical bumps `ω_t + h·1_{[t,T]}` are recorded as jumps: the node value
//! carries the bump while the left limit at that node does not. The
//! trapezoid integral uses left limits, so a bump never enters `∫₀ᵗω`.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::asian_oracle::ClosedForm;
use crate::error::{domain, Error, Result};
use crate::functional_calculus::Derivatives;

/// Relative tolerance for matching a time against a grid node.
const NODE_TOL: f64 = 1e-12;

/// Default number of uniform steps over `[0, T]`.
pub const DEFAULT_STEPS: usize = 512;

/// Strictly increasing nodes `0 = u_0 < … < u_M = T`.
#[derive(Clone)]
pub struct TimeGrid {
    nodes: Arc<[f64]>,
}

impl fmt::Debug for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimeGrid")
            .field("horizon", &self.horizon())
            .field("steps", &self.steps())
            .finish()
    }
}

impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes) || self.nodes[..] == other.nodes[..]
    }
}

impl TimeGrid {
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(domain("a time grid needs at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(domain(format!("first grid node must be 0, got {}", nodes[0])));
        }
        if nodes.iter().any(|u| !u.is_finite()) {
            return Err(domain("grid nodes must be finite"));
        }
        if let Some(w) = nodes.windows(2).find(|w| w[1] <= w[0]) {
            return Err(domain(format!(
                "grid nodes must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { nodes: nodes.into() })
    }

    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        Self::with_dates(horizon, steps, &[])
    }

    /// Uniform grid with the given dates inserted as extra nodes.
    pub fn with_dates(horizon: f64, steps: usize, dates: &[f64]) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(domain("grid needs at least one step"));
        }
        let mut nodes: Vec<f64> = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        nodes[steps] = horizon;
        for &d in dates {
            if !(0.0..=horizon).contains(&d) {
                return Err(domain(format!("date {d} outside [0, {horizon}]")));
            }
            let tol = NODE_TOL * horizon.max(1.0);
            if !nodes.iter().any(|u| (u - d).abs() <= tol) {
                nodes.push(d);
            }
        }
        nodes.sort_by(f64::total_cmp);
        Self::from_nodes(nodes)
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Number of nodes, `M + 1`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn step(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    fn tol(&self) -> f64 {
        NODE_TOL * self.horizon().max(1.0)
    }

    /// Index of the node equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = self.floor_index(t)?;
        if (self.nodes[k] - t).abs() <= self.tol() {
            return Some(k);
        }
        if k + 1 < self.nodes.len() && (self.nodes[k + 1] - t).abs() <= self.tol() {
            return Some(k + 1);
        }
        None
    }

    /// Largest node index with `u_k ≤ t` (node matching within tolerance).
    pub fn floor_index(&self, t: f64) -> Option<usize> {
        if t.is_nan() || t < -self.tol() || t > self.horizon() + self.tol() {
            return None;
        }
        let k = self.nodes.partition_point(|&u| u <= t + self.tol());
        Some(k.saturating_sub(1))
    }

    /// Node index for `t`, snapping down (with a warning) when off-grid.
    pub fn snap_down(&self, t: f64) -> Result<usize> {
        let k = self
            .floor_index(t)
            .ok_or_else(|| domain(format!("time {t} outside [0, {}]", self.horizon())))?;
        if (self.nodes[k] - t).abs() > self.tol() {
            log::warn!("time {t} is off-grid; snapped down to node {}", self.nodes[k]);
        }
        Ok(k)
    }

    /// Stable identifier of the node set (FNV-1a over the bit patterns).
    pub fn id(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for u in self.nodes.iter() {
            for b in u.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Trapezoid weights on nodes `from..=to`.
    pub fn trapezoid_weights(&self, from: usize, to: usize) -> Vec<f64> {
        let mut w = vec![0.0; to + 1 - from];
        for k in from..to {
            let half = 0.5 * self.step(k);
            w[k - from] += half;
            w[k + 1 - from] += half;
        }
        w
    }
}

/// A path stopped at a grid node.
#[derive(Clone, Debug)]
pub struct StoppedPath {
    grid: TimeGrid,
    values: Vec<f64>,
    /// `(node, left limit)` for nodes carrying a vertical bump.
    jumps: Vec<(usize, f64)>,
}

impl PartialEq for StoppedPath {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values && self.jumps == other.jumps
    }
}

impl StoppedPath {
    /// Path stopped at node `values.len() - 1`.
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(domain("a stopped path needs at least one value"));
        }
        if values.len() > grid.len() {
            return Err(domain(format!(
                "{} values exceed the {} grid nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(domain(format!("non-finite path value at node {k}")));
        }
        Ok(Self {
            grid,
            values,
            jumps: Vec::new(),
        })
    }

    pub fn constant(grid: TimeGrid, value: f64, stop_index: usize) -> Result<Self> {
        Self::new(grid, vec![value; stop_index + 1])
    }

    /// Samples `f` on nodes `0..=stop_index`.
    pub fn from_fn(grid: TimeGrid, stop_index: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes()[..=stop_index.min(grid.steps())]
            .iter()
            .map(|&u| f(u))
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn stop_index(&self) -> usize {
        self.values.len() - 1
    }

    pub fn stop_time(&self) -> f64 {
        self.grid.node(self.stop_index())
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn is_complete(&self) -> bool {
        self.stop_index() == self.grid.steps()
    }

    /// Node values (right values, bumps included).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(node, left limit)` pairs of bumped nodes.
    pub fn jumps(&self) -> &[(usize, f64)] {
        &self.jumps
    }

    /// `ω(t)` at the stop time.
    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Left limit of the path at node `k`.
    pub fn left_limit(&self, k: usize) -> f64 {
        match self.jumps.iter().find(|(n, _)| *n == k) {
            Some(&(_, left)) => left,
            None => self.values[k],
        }
    }

    /// `ω(min(s, t))`, linear between nodes.
    pub fn value_at(&self, s: f64) -> f64 {
        let j = self.stop_index();
        if s >= self.stop_time() {
            return self.values[j];
        }
        if s <= 0.0 {
            return self.values[0];
        }
        let k = self.grid.nodes().partition_point(|&u| u <= s) - 1;
        let (a, b) = (self.grid.node(k), self.grid.node(k + 1));
        let w = (s - a) / (b - a);
        (1.0 - w) * self.values[k] + w * self.left_limit(k + 1)
    }

    /// Restriction to the first `k + 1` nodes.
    pub fn stop_at_index(&self, k: usize) -> Result<Self> {
        if k > self.stop_index() {
            return Err(domain(format!(
                "cannot stop at node {k}: path is stopped at node {}",
                self.stop_index()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values[..=k].to_vec(),
            jumps: self.jumps.iter().copied().filter(|(n, _)| *n <= k).collect(),
        })
    }

    /// The path stopped at `t` (snapping down to the grid).
    pub fn stop_at(&self, t: f64) -> Result<Self> {
        if t < 0.0 || t > self.stop_time() + self.grid.tol() {
            return Err(domain(format!(
                "stop time {t} outside [0, {}]",
                self.stop_time()
            )));
        }
        self.stop_at_index(self.grid.snap_down(t)?)
    }

    /// `ω_t + h·1_{[t,T]}`.
    pub fn vertical_bump(&self, h: f64) -> Self {
        let mut out = self.clone();
        if h == 0.0 {
            return out;
        }
        let j = out.stop_index();
        if !out.jumps.iter().any(|(n, _)| *n == j) {
            out.jumps.push((j, out.values[j]));
        }
        out.values[j] += h;
        out
    }

    /// Flat continuation to node `k ≥ stop_index`.
    pub fn extend_to_index(&self, k: usize) -> Result<Self> {
        if k >= self.grid.len() {
            return Err(domain(format!("cannot extend past the horizon (node {k})")));
        }
        if k < self.stop_index() {
            return Err(domain("extension must not move the stop time backwards"));
        }
        let mut out = self.clone();
        out.values.resize(k + 1, self.last());
        Ok(out)
    }

    /// `(t + dt, ω_t)`; `dt` must land on a node (snaps down otherwise).
    pub fn horizontal_extend(&self, dt: f64) -> Result<Self> {
        if dt < 0.0 {
            return Err(domain(format!("negative extension {dt}")));
        }
        let target = self.stop_time() + dt;
        if target > self.horizon() + self.grid.tol() {
            return Err(domain(format!(
                "extension to {target} passes the horizon {}",
                self.horizon()
            )));
        }
        self.extend_to_index(self.grid.snap_down(target)?)
    }

    /// Appends freshly simulated node values after the stop time.
    pub fn append(&mut self, values: &[f64]) -> Result<()> {
        if self.values.len() + values.len() > self.grid.len() {
            return Err(domain("appended values run past the horizon"));
        }
        self.values.extend_from_slice(values);
        Ok(())
    }

    /// Trapezoid `∫₀ᵗ ω(v) dv` with left limits at jump nodes.
    pub fn path_integral(&self) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.stop_index() {
            acc += 0.5 * self.grid.step(k) * (self.values[k] + self.segment_end(k + 1));
        }
        acc
    }

    /// `∫₀^{u_k} ω` for every `k ≤ stop_index`, same convention as
    /// [`path_integral`](Self::path_integral).
    pub fn cumulative_integrals(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        out.push(acc);
        for k in 0..self.stop_index() {
            acc += 0.5 * self.grid.step(k) * (self.values[k] + self.segment_end(k + 1));
            out.push(acc);
        }
        out
    }

    #[inline]
    fn segment_end(&self, k: usize) -> f64 {
        if self.jumps.is_empty() {
            self.values[k]
        } else {
            self.left_limit(k)
        }
    }

    /// Realized quadratic variation `Σ (ω(u_{k+1}) − ω(u_k))²`.
    pub fn quadratic_variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
    }

    pub fn running_max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes `time,value` rows up to the stop time.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,value")?;
        for (u, v) in self.grid.nodes().iter().zip(&self.values) {
            writeln!(w, "{u},{v}")?;
        }
        Ok(())
    }

    /// Reads a `time,value` table whose times are a prefix of `grid`.
    pub fn read_csv<R: BufRead>(r: R, grid: TimeGrid) -> Result<Self> {
        let mut values = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("line {}: expected time,value", lineno + 1)))?;
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            let k = values.len();
            if k >= grid.len() || (grid.node(k) - t).abs() > grid.tol() {
                return Err(Error::Format(format!(
                    "line {}: time {t} does not match grid node {k}",
                    lineno + 1
                )));
            }
            values.push(v);
        }
        Self::new(grid, values)
    }

    /// Compact little-endian record: grid id, stop index, jump count,
    /// node values, then `(node, left limit)` jump pairs.
    pub fn write_record<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_u64::<LittleEndian>(self.grid.id())?;
        w.write_u32::<LittleEndian>(self.stop_index() as u32)?;
        w.write_u32::<LittleEndian>(self.jumps.len() as u32)?;
        for v in &self.values {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for (n, s) in &self.jumps {
            w.write_u32::<LittleEndian>(*n as u32)?;
            w.write_f64::<LittleEndian>(*s)?;
        }
        Ok(())
    }

    pub fn read_record<R: Read>(mut r: R, grid: &TimeGrid) -> Result<Self> {
        let id = r.read_u64::<LittleEndian>()?;
        if id != grid.id() {
            return Err(Error::Format(format!(
                "record grid id {id:#x} does not match grid {:#x}",
                grid.id()
            )));
        }
        let stop = r.read_u32::<LittleEndian>()? as usize;
        let njumps = r.read_u32::<LittleEndian>()? as usize;
        if stop >= grid.len() {
            return Err(Error::Format(format!("stop index {stop} beyond grid")));
        }
        let mut values = Vec::with_capacity(stop + 1);
        for _ in 0..=stop {
            values.push(r.read_f64::<LittleEndian>()?);
        }
        let mut path = Self::new(grid.clone(), values)?;
        for _ in 0..njumps {
            let n = r.read_u32::<LittleEndian>()? as usize;
            let s = r.read_f64::<LittleEndian>()?;
            if n > stop {
                return Err(Error::Format(format!("jump node {n} beyond stop {stop}")));
            }
            path.jumps.push((n, s));
        }
        Ok(path)
    }
}

/// `sup_s |a(t_a∧s) − b(t_b∧s)| + |t_a − t_b|` over the union of both grids.
pub fn d_infinity(a: &StoppedPath, b: &StoppedPath) -> Result<f64> {
    let (ha, hb) = (a.horizon(), b.horizon());
    if (ha - hb).abs() > NODE_TOL * ha.max(1.0) {
        return Err(domain(format!("incompatible horizons {ha} and {hb}")));
    }
    let sup = if a.grid == b.grid {
        a.grid
            .nodes()
            .iter()
            .map(|&u| (a.value_at(u) - b.value_at(u)).abs())
            .fold(0.0, f64::max)
    } else {
        let mut nodes: Vec<f64> = a.grid.nodes().iter().chain(b.grid.nodes()).copied().collect();
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        nodes
            .iter()
            .map(|&u| (a.value_at(u) - b.value_at(u)).abs())
            .fold(0.0, f64::max)
    };
    Ok(sup + (a.stop_time() - b.stop_time()).abs())
}

/// A non-anticipative functional `(t, ω_t) ↦ F(t, ω_t)`.
///
/// Implementations only ever see a [`StoppedPath`], so they cannot read
/// beyond the stop time.
pub trait PathFunctional: Send + Sync {
    fn eval(&self, path: &StoppedPath) -> f64;

    fn name(&self) -> String {
        "functional".to_string()
    }

    /// `F` at every stop index `from..=path.stop_index()`.
    ///
    /// The default restops the path for each index, which is quadratic in
    /// the path length; built-in functionals override it.
    fn eval_along(&self, path: &StoppedPath, from: usize) -> Vec<f64> {
        (from..=path.stop_index())
            .map(|k| self.eval(&path.stop_at_index(k).expect("index within path")))
            .collect()
    }

    /// Exact horizontal/vertical derivatives, when known.
    fn analytic_derivatives(&self, _path: &StoppedPath) -> Option<Derivatives> {
        None
    }

    /// Closed form of the discounted conditional expectation of this payoff
    /// at `maturity`, when one exists under every risk-neutral model.
    fn closed_form(&self, _maturity: f64) -> Option<ClosedForm> {
        None
    }
}

/// Closure-backed functional.
pub struct FnFunctional<F> {
    name: String,
    f: F,
}

impl<F> PathFunctional for FnFunctional<F>
where
    F: Fn(&StoppedPath) -> f64 + Send + Sync,
{
    fn eval(&self, path: &StoppedPath) -> f64 {
        (self.f)(path)
    }

    fn name(&self) -> String {
        self.name.clone()
    }
}

pub fn functional<F>(name: &str, f: F) -> Arc<dyn PathFunctional>
where
    F: Fn(&StoppedPath) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnFunctional {
        name: name.to_string(),
        f,
    })
}
