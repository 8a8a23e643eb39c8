//! Finite grid worlds, ground-truth environments and the observation channel.
//!
//! States are cells `(x, y)` with `x` the column and `y` the row. The linear
//! index of a state is `y * width + x`, so ordering by index is the same as
//! ordering by `(row, column)`.

use std::fmt;
use std::io::Read;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::Kernel;

/// Jitter schedule for factorizing prior covariance matrices.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Smallest rescaled reward, as a fraction of `r_max`.
const REWARD_FLOOR: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {width}x{height}")]
    EmptyGrid { width: usize, height: usize },
    #[error("cell size must be positive and finite, got {0}")]
    BadCellSize(f64),
    #[error("r_max must be positive and finite, got {0}")]
    BadRewardBound(f64),
    #[error("kernel matrix is not positive definite (jitter up to {jitter:e} failed)")]
    NotPositiveDefinite { jitter: f64 },
    #[error("field has {got} values but the grid has {expected} states")]
    ShapeMismatch { expected: usize, got: usize },
}

/// A grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub x: usize,
    pub y: usize,
}

impl State {
    pub const fn new(x: usize, y: usize) -> Self {
        State { x, y }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// The five grid actions. The declaration order is the tie-break order used
/// everywhere a choice between actions has to be made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stay,
    Up,
    Right,
    Down,
    Left,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Stay,
        Action::Up,
        Action::Right,
        Action::Down,
        Action::Left,
    ];

    /// Unit displacement `(dx, dy)`; `up` increases the row.
    pub const fn delta(self) -> (isize, isize) {
        match self {
            Action::Stay => (0, 0),
            Action::Up => (0, 1),
            Action::Right => (1, 0),
            Action::Down => (0, -1),
            Action::Left => (-1, 0),
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Action::Stay => "stay",
            Action::Up => "up",
            Action::Right => "right",
            Action::Down => "down",
            Action::Left => "left",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A rectangular grid with deterministic, boundary-absorbing moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridWorld {
    width: usize,
    height: usize,
    cell_size: f64,
}

impl GridWorld {
    pub fn new(width: usize, height: usize, cell_size: f64) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyGrid { width, height });
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(GridError::BadCellSize(cell_size));
        }
        Ok(GridWorld {
            width,
            height,
            cell_size,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn num_states(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, s: State) -> bool {
        s.x < self.width && s.y < self.height
    }

    pub fn index(&self, s: State) -> usize {
        debug_assert!(self.contains(s), "{s} outside {}x{}", self.width, self.height);
        s.y * self.width + s.x
    }

    pub fn state(&self, index: usize) -> State {
        debug_assert!(index < self.num_states());
        State::new(index % self.width, index / self.width)
    }

    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        (0..self.num_states()).map(move |i| self.state(i))
    }

    /// The deterministic transition `f(s, a)`. Moves that would leave the
    /// grid keep the agent where it is.
    pub fn transition(&self, s: State, a: Action) -> State {
        let (dx, dy) = a.delta();
        let x = s.x as isize + dx;
        let y = s.y as isize + dy;
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            s
        } else {
            State::new(x as usize, y as usize)
        }
    }

    /// `transition` on linear indices.
    pub fn step_index(&self, index: usize, a: Action) -> usize {
        self.index(self.transition(self.state(index), a))
    }

    /// Physical position of the cell center.
    pub fn position(&self, s: State) -> [f64; 2] {
        [s.x as f64 * self.cell_size, s.y as f64 * self.cell_size]
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states().map(|s| self.position(s)).collect()
    }

    /// Euclidean distance between two states in physical units.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (sa, sb) = (self.state(a), self.state(b));
        let dx = sa.x as f64 - sb.x as f64;
        let dy = sa.y as f64 - sb.y as f64;
        (dx * dx + dy * dy).sqrt() * self.cell_size
    }

    /// `s` followed by its distinct in-grid 4-neighbors, in action order.
    pub fn closed_neighborhood(&self, s: State) -> Vec<State> {
        let mut out = Vec::with_capacity(5);
        for a in Action::ALL {
            let n = self.transition(s, a);
            if !out.contains(&n) {
                out.push(n);
            }
        }
        out
    }
}

/// Observation noise standard deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoise {
    pub reward_std: f64,
    pub safety_std: f64,
}

/// The ground-truth reward and safety functions, hidden from the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentTruth {
    pub reward: Vec<f64>,
    pub safety: Vec<f64>,
    pub r_max: f64,
    pub seed: u64,
    pub noise: ObservationNoise,
}

impl EnvironmentTruth {
    /// Assemble an environment from explicit fields, checking the reward
    /// codomain `(0, r_max]`.
    pub fn from_fields(
        world: &GridWorld,
        reward: Vec<f64>,
        safety: Vec<f64>,
        r_max: f64,
        noise: ObservationNoise,
    ) -> Result<Self, GridError> {
        let n = world.num_states();
        for field in [&reward, &safety] {
            if field.len() != n {
                return Err(GridError::ShapeMismatch {
                    expected: n,
                    got: field.len(),
                });
            }
        }
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(GridError::BadRewardBound(r_max));
        }
        assert!(
            reward.iter().all(|&r| r > 0.0 && r <= r_max),
            "rewards must lie in (0, r_max]"
        );
        assert!(safety.iter().all(|g| g.is_finite()), "safety must be finite");
        Ok(EnvironmentTruth {
            reward,
            safety,
            r_max,
            seed: 0,
            noise,
        })
    }

    /// Flat `(x, y, reward, safety)` records, in state-index order.
    pub fn snapshot(&self, world: &GridWorld) -> Vec<(usize, usize, f64, f64)> {
        world
            .states()
            .enumerate()
            .map(|(i, s)| (s.x, s.y, self.reward[i], self.safety[i]))
            .collect()
    }

    pub fn write_snapshot_csv<W: std::io::Write>(
        &self,
        world: &GridWorld,
        mut out: W,
    ) -> std::io::Result<()> {
        writeln!(out, "x,y,reward,safety")?;
        for (x, y, r, g) in self.snapshot(world) {
            writeln!(out, "{x},{y},{r},{g}")?;
        }
        Ok(())
    }
}

/// A noisy reading of the reward and safety functions at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: State,
    pub reward_sample: f64,
    pub safety_sample: f64,
}

/// Lower Cholesky factor of `k` evaluated on `points`, retrying with
/// increasing diagonal jitter.
pub(crate) fn prior_cholesky(kernel: &Kernel, points: &[[f64; 2]]) -> Result<DMatrix<f64>, GridError> {
    let n = points.len();
    let base = DMatrix::from_fn(n, n, |i, j| kernel.eval(points[i], points[j]));
    if let Some(c) = base.clone().cholesky() {
        return Ok(c.unpack());
    }
    let mut jitter = JITTER_START;
    loop {
        let mut m = base.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c.unpack());
        }
        if jitter >= JITTER_MAX {
            return Err(GridError::NotPositiveDefinite { jitter });
        }
        jitter *= 10.0;
    }
}

/// One exact draw from the zero-mean GP prior over every grid state.
pub(crate) fn draw_prior_field<R: Rng>(factor: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let n = factor.nrows();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (0..n)
        .map(|i| (0..=i).map(|j| factor[(i, j)] * z[j]).sum())
        .collect()
}

/// Affine map of `values` onto `[REWARD_FLOOR * r_max, r_max]`.
pub(crate) fn rescale_reward(values: &[f64], r_max: f64) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = REWARD_FLOOR * r_max;
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return vec![r_max; values.len()];
    }
    values
        .iter()
        .map(|v| {
            let r = floor + (v - lo) / (hi - lo) * (r_max - floor);
            r.clamp(floor, r_max)
        })
        .collect()
}

/// Seeded reward field drawn from a GP prior and rescaled into `(0, r_max]`.
pub fn sample_gp_reward(
    world: &GridWorld,
    kernel: &Kernel,
    seed: u64,
    r_max: f64,
) -> Result<Vec<f64>, GridError> {
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(GridError::BadRewardBound(r_max));
    }
    let factor = prior_cholesky(kernel, &world.positions())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rescale_reward(&draw_prior_field(&factor, &mut rng), r_max))
}

/// Draw reward and safety fields from zero-mean GP priors over the whole grid.
///
/// The reward draw happens first, then the safety draw, from one ChaCha
/// stream seeded with `seed`. The reward is rescaled affinely so that its
/// minimum maps to `0.01 * r_max` and its maximum to `r_max`; safety is left
/// as drawn.
pub fn sample_gp_environment(
    world: &GridWorld,
    kernel_r: &Kernel,
    kernel_g: &Kernel,
    seed: u64,
    r_max: f64,
) -> Result<EnvironmentTruth, GridError> {
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(GridError::BadRewardBound(r_max));
    }
    let points = world.positions();
    let factor_r = prior_cholesky(kernel_r, &points)?;
    let factor_g = if kernel_g == kernel_r {
        factor_r.clone()
    } else {
        prior_cholesky(kernel_g, &points)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_reward = draw_prior_field(&factor_r, &mut rng);
    let safety = draw_prior_field(&factor_g, &mut rng);
    Ok(EnvironmentTruth {
        reward: rescale_reward(&raw_reward, r_max),
        safety,
        r_max,
        seed,
        noise: ObservationNoise::default(),
    })
}

/// Observe the current state and its distinct 4-neighbors.
pub fn observe<R: Rng>(
    env: &EnvironmentTruth,
    world: &GridWorld,
    s: State,
    rng: &mut R,
) -> Vec<Observation> {
    world
        .closed_neighborhood(s)
        .into_iter()
        .map(|n| {
            let i = world.index(n);
            let nr: f64 = rng.sample(StandardNormal);
            let ng: f64 = rng.sample(StandardNormal);
            Observation {
                state: n,
                reward_sample: env.reward[i] + env.noise.reward_std * nr,
                safety_sample: env.safety[i] + env.noise.safety_std * ng,
            }
        })
        .collect()
}

/// Supported elevation file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElevationFormat {
    Csv,
    EsriAscii,
}

#[derive(Debug, Error, PartialEq)]
pub enum ElevationError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("row {row}, column {column}: {message}")]
    Cell {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("row {row}: expected {expected} values, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("header: {0}")]
    Header(String),
    #[error("elevation grid is empty")]
    Empty,
    #[error("cell size must be positive and finite, got {0}")]
    BadCellSize(f64),
}

/// A rectangular elevation raster. Row `r` of the file becomes grid row
/// `y = r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationField {
    width: usize,
    height: usize,
    cell_size: f64,
    values: Vec<f64>,
}

impl ElevationField {
    pub fn from_rows(rows: Vec<Vec<f64>>, cell_size: f64) -> Result<Self, ElevationError> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(ElevationError::BadCellSize(cell_size));
        }
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err(ElevationError::Empty);
        }
        let mut values = Vec::with_capacity(width * height);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(ElevationError::Ragged {
                    row: r + 1,
                    expected: width,
                    found: row.len(),
                });
            }
            values.extend(row);
        }
        Ok(ElevationField {
            width,
            height,
            cell_size,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.width).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> ElevationField {
        let mut values = Vec::with_capacity(self.values.len());
        for x in 0..self.width {
            for y in 0..self.height {
                values.push(self.get(x, y));
            }
        }
        ElevationField {
            width: self.height,
            height: self.width,
            cell_size: self.cell_size,
            values,
        }
    }

    pub fn world(&self) -> GridWorld {
        GridWorld::new(self.width, self.height, self.cell_size)
            .expect("field dimensions are validated at construction")
    }
}

fn parse_cell(token: &str, row: usize, column: usize) -> Result<f64, ElevationError> {
    let v: f64 = token.trim().parse().map_err(|_| ElevationError::Cell {
        row,
        column,
        message: format!("not a number: {:?}", token.trim()),
    })?;
    if !v.is_finite() {
        return Err(ElevationError::Cell {
            row,
            column,
            message: format!("non-finite value {v}"),
        });
    }
    Ok(v)
}

fn parse_csv(text: &str, cell_size: f64) -> Result<ElevationField, ElevationError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, tok)| parse_cell(tok, i + 1, c + 1))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(ElevationError::Ragged {
                    row: i + 1,
                    expected: first,
                    found: row.len(),
                });
            }
        }
        rows.push(row);
    }
    ElevationField::from_rows(rows, cell_size)
}

fn parse_esri_ascii(text: &str) -> Result<ElevationField, ElevationError> {
    let mut lines = text.lines().enumerate().peekable();
    let mut ncols = None;
    let mut nrows = None;
    let mut cellsize = None;
    let mut nodata = None;
    let mut xll = false;
    let mut yll = false;

    while let Some((_, line)) = lines.peek() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else {
            lines.next();
            continue;
        };
        if key.parse::<f64>().is_ok() {
            break;
        }
        let value = parts
            .next()
            .ok_or_else(|| ElevationError::Header(format!("{key} has no value")))?;
        let num: f64 = value
            .parse()
            .map_err(|_| ElevationError::Header(format!("{key}: not a number: {value:?}")))?;
        match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols = Some(num),
            "nrows" => nrows = Some(num),
            "xllcorner" | "xllcenter" => xll = true,
            "yllcorner" | "yllcenter" => yll = true,
            "cellsize" => cellsize = Some(num),
            "nodata_value" => nodata = Some(num),
            other => return Err(ElevationError::Header(format!("unknown key {other:?}"))),
        }
        lines.next();
    }

    let dim = |v: Option<f64>, name: &str| -> Result<usize, ElevationError> {
        match v {
            Some(n) if n >= 1.0 && n.fract() == 0.0 => Ok(n as usize),
            Some(n) => Err(ElevationError::Header(format!("{name} must be a positive integer, got {n}"))),
            None => Err(ElevationError::Header(format!("missing {name}"))),
        }
    };
    let ncols = dim(ncols, "ncols")?;
    let nrows = dim(nrows, "nrows")?;
    if !xll {
        return Err(ElevationError::Header("missing xllcorner".into()));
    }
    if !yll {
        return Err(ElevationError::Header("missing yllcorner".into()));
    }
    let cellsize = cellsize.ok_or_else(|| ElevationError::Header("missing cellsize".into()))?;

    let mut values = Vec::with_capacity(ncols * nrows);
    for (_, line) in lines {
        for tok in line.split_whitespace() {
            let k = values.len();
            let (row, column) = (k / ncols + 1, k % ncols + 1);
            if k >= ncols * nrows {
                return Err(ElevationError::Cell {
                    row,
                    column,
                    message: format!("extra value beyond {nrows}x{ncols} grid"),
                });
            }
            let v = parse_cell(tok, row, column)?;
            if nodata == Some(v) {
                return Err(ElevationError::Cell {
                    row,
                    column,
                    message: "NODATA cell".into(),
                });
            }
            values.push(v);
        }
    }
    if values.len() < ncols * nrows {
        let k = values.len();
        return Err(ElevationError::Cell {
            row: k / ncols + 1,
            column: k % ncols + 1,
            message: format!("missing value, expected {} values", ncols * nrows),
        });
    }
    let rows = values.chunks(ncols).map(<[f64]>::to_vec).collect();
    ElevationField::from_rows(rows, cellsize)
}

/// Read an elevation raster. `cell_size` is required for CSV input; for
/// ESRI ASCII the header's `cellsize` is used and `cell_size`, when given,
/// must agree with it.
pub fn ingest_elevation_grid<R: Read>(
    mut source: R,
    format: ElevationFormat,
    cell_size: Option<f64>,
) -> Result<ElevationField, ElevationError> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| ElevationError::Io(e.to_string()))?;
    match format {
        ElevationFormat::Csv => {
            let cs = cell_size
                .ok_or_else(|| ElevationError::Header("CSV input needs an explicit cell size".into()))?;
            parse_csv(&text, cs)
        }
        ElevationFormat::EsriAscii => {
            let field = parse_esri_ascii(&text)?;
            if let Some(cs) = cell_size {
                if (cs - field.cell_size).abs() > 1e-9 * cs.abs().max(1.0) {
                    return Err(ElevationError::Header(format!(
                        "cellsize {} disagrees with configured cell size {cs}",
                        field.cell_size
                    )));
                }
            }
            Ok(field)
        }
    }
}

/// Safety from terrain: the negated steepest rise-over-run to any in-grid
/// 4-neighbor. With `h = -tan(θ)` the constraint `g(s) >= h` forbids slopes
/// steeper than `θ`.
pub fn slope_safety_from_elevation(elev: &ElevationField) -> Vec<f64> {
    let (w, h) = (elev.width, elev.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let z = elev.get(x, y);
            let mut steepest = 0.0f64;
            let mut visit = |nx: usize, ny: usize| {
                steepest = steepest.max((elev.get(nx, ny) - z).abs() / elev.cell_size);
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
            out.push(-steepest);
        }
    }
    out
}

/// The slope threshold `-tan(degrees)`.
pub fn slope_threshold(degrees: f64) -> f64 {
    -degrees.to_radians().tan()
}

/// Smallest `L` with `|g(a) - g(b)| <= L * d(a, b)` over every pair of states.
pub fn lipschitz_constant(world: &GridWorld, field: &[f64]) -> f64 {
    let n = world.num_states();
    let mut best = 0.0f64;
    for a in 0..n {
        for b in (a + 1)..n {
            best = best.max((field[a] - field[b]).abs() / world.distance(a, b));
        }
    }
    best
}
