//! Dense nearest-neighbor fields between a query tensor and the training
//! database at one layer.
//!
//! [`exhaustive_search`] is the exact reference. The approximate search
//! alternates uniform random sampling over the candidate images with
//! propagation of neighbors' matches, both adopting a proposal only when it
//! is strictly closer. Propagation is double-buffered and every cell owns its
//! own random stream, so the resulting field does not depend on the number of
//! worker threads.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::database::TrainingDatabase;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{view_distance, view_unchecked, ActivationTensor, LayerSpec};

pub const DEFAULT_ITERATIONS: usize = 1024;
pub const DEFAULT_SAMPLES_PER_CELL: usize = 1;

/// Best known match for one query hyperpatch. Positions are top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub image_id: u32,
    pub train_pos: (usize, usize),
    pub distance: f64,
}

impl Correspondence {
    /// Total order used by the exhaustive search: distance, then image id,
    /// then row-major position.
    fn rank_cmp(&self, other: &Correspondence) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.image_id.cmp(&other.image_id))
            .then(self.train_pos.cmp(&other.train_pos))
    }
}

/// Row-major grid of correspondences, one per stride-1 query hyperpatch.
#[derive(Debug, Clone, PartialEq)]
pub struct NNField {
    pub layer_name: String,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Correspondence>,
    /// Distance evaluations spent building the field.
    pub eval_count: u64,
}

impl NNField {
    pub fn get(&self, y: usize, x: usize) -> &Correspondence {
        &self.cells[y * self.cols + x]
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn distances(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().map(|c| c.distance)
    }

    /// Distinct matched image ids, ascending.
    pub fn image_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.cells.iter().map(|c| c.image_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Checks that the field fits the query grid and points at valid
    /// positions of the database at `layer`.
    pub fn validate(&self, db: &TrainingDatabase, layer: &LayerSpec, query_grid: Option<(usize, usize)>) -> Result<()> {
        if self.layer_name != layer.name {
            return Err(Error::Config(format!(
                "field was built at layer `{}`, not `{}`",
                self.layer_name, layer.name
            )));
        }
        if self.rows == 0 || self.cols == 0 || self.cells.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "field grid {}x{} with {} cells is empty or inconsistent",
                self.rows,
                self.cols,
                self.cells.len()
            )));
        }
        if let Some(grid) = query_grid {
            if grid != (self.rows, self.cols) {
                return Err(Error::Config(format!(
                    "field grid {}x{} does not match query grid {}x{}",
                    self.rows, self.cols, grid.0, grid.1
                )));
            }
        }
        let (th, tw, _) = db
            .layer_dims(&layer.name)
            .ok_or_else(|| Error::Config(format!("database has no tensors for layer `{}`", layer.name)))?;
        let (gh, gw) = layer.grid_dims(th, tw);
        for (index, cell) in self.cells.iter().enumerate() {
            if cell.image_id as usize >= db.len() {
                return Err(Error::Config(format!(
                    "cell {index} references image {} but the database has {} pairs",
                    cell.image_id,
                    db.len()
                )));
            }
            if cell.train_pos.0 >= gh || cell.train_pos.1 >= gw {
                return Err(Error::Config(format!(
                    "cell {index} references position {:?} outside the {gh}x{gw} grid",
                    cell.train_pos
                )));
            }
            if !cell.distance.is_finite() {
                return Err(Error::Config(format!("cell {index} has a non-finite distance")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchConfig {
    pub iterations: usize,
    pub rng_seed: u64,
    pub random_samples_per_cell_per_iter: usize,
    pub candidate_image_ids: Vec<u32>,
}

impl SearchConfig {
    pub fn new(candidate_image_ids: Vec<u32>) -> Self {
        SearchConfig {
            iterations: DEFAULT_ITERATIONS,
            rng_seed: 0,
            random_samples_per_cell_per_iter: DEFAULT_SAMPLES_PER_CELL,
            candidate_image_ids,
        }
    }

    pub fn iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn samples_per_cell(mut self, samples: usize) -> Self {
        self.random_samples_per_cell_per_iter = samples;
        self
    }
}

/// Scan direction hint for propagation. Results are identical for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of_round(round: usize) -> Self {
        if round.is_multiple_of(2) {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// One independent random stream per field cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellRngs {
    streams: Vec<SplitMix64>,
}

impl CellRngs {
    pub fn new(seed: u64, cells: usize) -> Self {
        CellRngs {
            streams: (0..cells).map(|i| SplitMix64::for_cell(seed, i)).collect(),
        }
    }
}

const PROPAGATION_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

/// Validated query, database and layer bundle shared by all search steps.
struct Context<'a> {
    query: &'a ActivationTensor,
    spec: &'a LayerSpec,
    tensors: Vec<&'a ActivationTensor>,
    query_grid: (usize, usize),
    train_grid: (usize, usize),
}

impl<'a> Context<'a> {
    fn new(query: &'a ActivationTensor, db: &'a TrainingDatabase, spec: &'a LayerSpec) -> Result<Self> {
        let declared = db.layer(&spec.name)?;
        if declared != spec {
            return Err(Error::Config(format!(
                "layer spec `{}` differs from the database declaration",
                spec.name
            )));
        }
        spec.check_tensor(query)?;
        if db.is_empty() {
            return Err(Error::EmptySet("the training database is empty".into()));
        }
        let tensors = db
            .pairs()
            .iter()
            .map(|p| p.tensor(&spec.name))
            .collect::<Result<Vec<_>>>()?;
        let (th, tw, _) = tensors[0].dims();
        Ok(Context {
            query,
            spec,
            tensors,
            query_grid: spec.grid_dims(query.height(), query.width()),
            train_grid: spec.grid_dims(th, tw),
        })
    }

    fn check_candidates(&self, candidates: &[u32]) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::EmptySet("no candidate images to search".into()));
        }
        if let Some(&bad) = candidates.iter().find(|&&id| id as usize >= self.tensors.len()) {
            return Err(Error::Config(format!(
                "candidate image {bad} is not in the database ({} pairs)",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    fn check_field(&self, field: &NNField) -> Result<()> {
        if field.layer_name != self.spec.name || (field.rows, field.cols) != self.query_grid {
            return Err(Error::Config(format!(
                "field {}x{} at `{}` does not fit query grid {}x{} at `{}`",
                field.rows, field.cols, field.layer_name, self.query_grid.0, self.query_grid.1, self.spec.name
            )));
        }
        if field.cells.len() != field.rows * field.cols {
            return Err(Error::Config("field cell count does not match its grid".into()));
        }
        let (gh, gw) = self.train_grid;
        for cell in &field.cells {
            if cell.image_id as usize >= self.tensors.len() || cell.train_pos.0 >= gh || cell.train_pos.1 >= gw {
                return Err(Error::Config(format!(
                    "field references image {} at {:?}, outside the database",
                    cell.image_id, cell.train_pos
                )));
            }
        }
        Ok(())
    }

    fn cell_count(&self) -> usize {
        self.query_grid.0 * self.query_grid.1
    }

    fn cell_pos(&self, index: usize) -> (usize, usize) {
        (index / self.query_grid.1, index % self.query_grid.1)
    }

    fn distance(&self, query_pos: (usize, usize), image_id: u32, train_pos: (usize, usize)) -> f64 {
        let a = view_unchecked(self.query, query_pos, self.spec);
        let b = view_unchecked(self.tensors[image_id as usize], train_pos, self.spec);
        view_distance(&a, &b)
    }

    fn propose(&self, query_pos: (usize, usize), image_id: u32, train_pos: (usize, usize)) -> Correspondence {
        Correspondence {
            image_id,
            train_pos,
            distance: self.distance(query_pos, image_id, train_pos),
        }
    }

    /// Uniform draw over candidate images × valid positions.
    fn sample(&self, query_pos: (usize, usize), candidates: &[u32], rng: &mut SplitMix64) -> Correspondence {
        let positions = (self.train_grid.0 * self.train_grid.1) as u64;
        let draw = rng.below(candidates.len() as u64 * positions);
        let image_id = candidates[(draw / positions) as usize];
        let offset = (draw % positions) as usize;
        let train_pos = (offset / self.train_grid.1, offset % self.train_grid.1);
        self.propose(query_pos, image_id, train_pos)
    }

    fn empty_field(&self, cells: Vec<Correspondence>, eval_count: u64) -> NNField {
        NNField {
            layer_name: self.spec.name.clone(),
            rows: self.query_grid.0,
            cols: self.query_grid.1,
            cells,
            eval_count,
        }
    }
}

/// Exact field: every cell holds the global argmin over all candidate images
/// and positions, ties resolved by ascending image id then row-major position.
pub fn exhaustive_search(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    candidates: &[u32],
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    ctx.check_candidates(candidates)?;
    let (gh, gw) = ctx.train_grid;
    let cells: Vec<Correspondence> = (0..ctx.cell_count())
        .into_par_iter()
        .map(|index| {
            let qpos = ctx.cell_pos(index);
            let mut best: Option<Correspondence> = None;
            for &image_id in candidates {
                for ty in 0..gh {
                    for tx in 0..gw {
                        let proposal = ctx.propose(qpos, image_id, (ty, tx));
                        if best.is_none_or(|b| proposal.rank_cmp(&b) == Ordering::Less) {
                            best = Some(proposal);
                        }
                    }
                }
            }
            best.expect("candidates and positions are non-empty")
        })
        .collect();
    let evals = (ctx.cell_count() * candidates.len() * gh * gw) as u64;
    Ok(ctx.empty_field(cells, evals))
}

/// Exact evaluation count of [`exhaustive_search`]: cells × Σ valid positions.
pub fn exhaustive_eval_count(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    candidates: &[u32],
) -> Result<u64> {
    let ctx = Context::new(query, db, layer)?;
    ctx.check_candidates(candidates)?;
    let positions = (ctx.train_grid.0 * ctx.train_grid.1) as u64;
    Ok(ctx.cell_count() as u64 * positions * candidates.len() as u64)
}

/// Random initial field drawn from fresh per-cell streams seeded by
/// `config.rng_seed`.
pub fn hpm_init(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    config: &SearchConfig,
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    let mut rngs = CellRngs::new(config.rng_seed, ctx.cell_count());
    init_with(&ctx, &config.candidate_image_ids, &mut rngs)
}

/// Like [`hpm_init`] but draws from caller-owned streams, which then continue
/// into later random-search passes.
pub fn hpm_init_with(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    candidates: &[u32],
    rngs: &mut CellRngs,
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    init_with(&ctx, candidates, rngs)
}

fn init_with(ctx: &Context<'_>, candidates: &[u32], rngs: &mut CellRngs) -> Result<NNField> {
    ctx.check_candidates(candidates)?;
    check_rngs(ctx, rngs)?;
    let cells: Vec<Correspondence> = rngs
        .streams
        .par_iter_mut()
        .enumerate()
        .map(|(index, rng)| ctx.sample(ctx.cell_pos(index), candidates, rng))
        .collect();
    let evals = cells.len() as u64;
    Ok(ctx.empty_field(cells, evals))
}

fn check_rngs(ctx: &Context<'_>, rngs: &CellRngs) -> Result<()> {
    if rngs.streams.len() != ctx.cell_count() {
        return Err(Error::Config(format!(
            "{} random streams for {} field cells",
            rngs.streams.len(),
            ctx.cell_count()
        )));
    }
    Ok(())
}

/// One propagation pass. Each cell considers its four axis neighbors'
/// matches shifted back by the neighbor offset, reading only from `field`.
pub fn hpm_propagate(
    field: &NNField,
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    parity: Parity,
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    ctx.check_field(field)?;
    Ok(propagate(&ctx, field, parity))
}

fn propagate(ctx: &Context<'_>, field: &NNField, parity: Parity) -> NNField {
    let (rows, cols) = (field.rows as isize, field.cols as isize);
    let (gh, gw) = (ctx.train_grid.0 as isize, ctx.train_grid.1 as isize);
    let visit = |index: usize| -> (Correspondence, u64) {
        let (qy, qx) = ctx.cell_pos(index);
        let mut best = field.cells[index];
        let mut evals = 0;
        for (dy, dx) in PROPAGATION_OFFSETS {
            let (ny, nx) = (qy as isize + dy, qx as isize + dx);
            if ny < 0 || nx < 0 || ny >= rows || nx >= cols {
                continue;
            }
            let neighbor = field.cells[(ny * cols + nx) as usize];
            let (ty, tx) = (neighbor.train_pos.0 as isize - dy, neighbor.train_pos.1 as isize - dx);
            if ty < 0 || tx < 0 || ty >= gh || tx >= gw {
                continue;
            }
            let target = (ty as usize, tx as usize);
            if (neighbor.image_id, target) == (best.image_id, best.train_pos) {
                continue;
            }
            let proposal = ctx.propose((qy, qx), neighbor.image_id, target);
            evals += 1;
            if proposal.distance < best.distance {
                best = proposal;
            }
        }
        (best, evals)
    };
    let n = field.cells.len();
    let mut results: Vec<(Correspondence, u64)> = match parity {
        Parity::Even => (0..n).into_par_iter().map(visit).collect(),
        Parity::Odd => (0..n).into_par_iter().rev().map(visit).collect(),
    };
    if parity == Parity::Odd {
        results.reverse();
    }
    let evals: u64 = results.iter().map(|r| r.1).sum();
    NNField {
        layer_name: field.layer_name.clone(),
        rows: field.rows,
        cols: field.cols,
        cells: results.into_iter().map(|r| r.0).collect(),
        eval_count: field.eval_count + evals,
    }
}

/// One random-search pass: every cell draws
/// `config.random_samples_per_cell_per_iter` uniform candidates from its own
/// stream and keeps any strictly closer one.
pub fn hpm_random_search(
    field: &NNField,
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    config: &SearchConfig,
    rngs: &mut CellRngs,
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    ctx.check_field(field)?;
    ctx.check_candidates(&config.candidate_image_ids)?;
    check_rngs(&ctx, rngs)?;
    Ok(random_search(&ctx, field, config, rngs))
}

fn random_search(ctx: &Context<'_>, field: &NNField, config: &SearchConfig, rngs: &mut CellRngs) -> NNField {
    let samples = config.random_samples_per_cell_per_iter;
    let candidates = &config.candidate_image_ids;
    let cells: Vec<Correspondence> = rngs
        .streams
        .par_iter_mut()
        .zip(field.cells.par_iter())
        .enumerate()
        .map(|(index, (rng, &current))| {
            let qpos = ctx.cell_pos(index);
            let mut best = current;
            for _ in 0..samples {
                let proposal = ctx.sample(qpos, candidates, rng);
                if proposal.distance < best.distance {
                    best = proposal;
                }
            }
            best
        })
        .collect();
    NNField {
        layer_name: field.layer_name.clone(),
        rows: field.rows,
        cols: field.cols,
        cells,
        eval_count: field.eval_count + (field.cells.len() * samples) as u64,
    }
}

/// Initialization followed by `config.iterations` rounds of random search
/// and propagation.
pub fn hpm_run(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    config: &SearchConfig,
) -> Result<NNField> {
    hpm_run_traced(query, db, layer, config, |_, _| {})
}

/// [`hpm_run`] that hands the field to `observer` after initialization
/// (round 0) and after every completed round.
pub fn hpm_run_traced(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    config: &SearchConfig,
    mut observer: impl FnMut(usize, &NNField),
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    ctx.check_candidates(&config.candidate_image_ids)?;
    let mut rngs = CellRngs::new(config.rng_seed, ctx.cell_count());
    let field = init_with(&ctx, &config.candidate_image_ids, &mut rngs)?;
    observer(0, &field);
    Ok(iterate(&ctx, field, config, &mut rngs, observer))
}

/// Runs the search rounds starting from an existing field instead of a
/// random initialization.
pub fn hpm_refine(
    field: NNField,
    query: &ActivationTensor,
    db: &TrainingDatabase,
    layer: &LayerSpec,
    config: &SearchConfig,
) -> Result<NNField> {
    let ctx = Context::new(query, db, layer)?;
    ctx.check_field(&field)?;
    ctx.check_candidates(&config.candidate_image_ids)?;
    let mut rngs = CellRngs::new(config.rng_seed, ctx.cell_count());
    Ok(iterate(&ctx, field, config, &mut rngs, |_, _| {}))
}

fn iterate(
    ctx: &Context<'_>,
    mut field: NNField,
    config: &SearchConfig,
    rngs: &mut CellRngs,
    mut observer: impl FnMut(usize, &NNField),
) -> NNField {
    for round in 0..config.iterations {
        field = random_search(ctx, &field, config, rngs);
        field = propagate(ctx, &field, Parity::of_round(round));
        observer(round + 1, &field);
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::database::TrainingPair;
    use crate::tensor::LayerRole;
    use image::RgbImage;

    fn spec(d: usize) -> LayerSpec {
        LayerSpec {
            name: "l".into(),
            hyperpatch_h: 1,
            hyperpatch_w: 1,
            depth: d,
            patch_size: 1,
            scale: 1,
            role: LayerRole::Encoder,
        }
    }

    fn tensor(h: usize, w: usize, d: usize, values: Vec<f32>) -> ActivationTensor {
        ActivationTensor::new("l", h, w, d, values).unwrap()
    }

    fn db(tensors: Vec<ActivationTensor>, s: &LayerSpec) -> TrainingDatabase {
        let pairs = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| TrainingPair::new(i as u32, RgbImage::new(4, 4), RgbImage::new(4, 4), [t]))
            .collect();
        TrainingDatabase::new(pairs, [s.clone()], None).unwrap()
    }

    #[test]
    fn empty_candidates_rejected() {
        let s = spec(2);
        let t = tensor(2, 2, 2, vec![1., 0., 0., 1., 1., 1., 1., 2.]);
        let db = db(vec![t.clone()], &s);
        assert!(matches!(exhaustive_search(&t, &db, &s, &[]), Err(Error::EmptySet(_))));
        let config = SearchConfig::new(vec![]);
        assert!(matches!(hpm_run(&t, &db, &s, &config), Err(Error::EmptySet(_))));
    }

    #[test]
    fn single_assignment_init() {
        let s = spec(2);
        let train = tensor(1, 1, 2, vec![1., 2.]);
        let query = tensor(2, 3, 2, (1..=12).map(|v| v as f32).collect());
        let db = db(vec![train], &s);
        let field = hpm_init(&query, &db, &s, &SearchConfig::new(vec![0]).seed(99)).unwrap();
        assert_eq!((field.rows, field.cols), (2, 3));
        assert!(field.cells.iter().all(|c| c.image_id == 0 && c.train_pos == (0, 0)));
        assert_eq!(field.eval_count, 6);
    }

    #[test]
    fn propagate_adopts_shifted_optimum() {
        // query row: [a, b]; training row: [a, b, c].
        // Cell 0 already matches (0,0); cell 1 holds the poor match (0,2).
        // The neighbor to its left proposes (0,0) + (0,1) = (0,1), which is exact.
        let s = spec(2);
        let train = tensor(1, 3, 2, vec![1., 0., 0., 1., -1., -1.]);
        let query = tensor(1, 2, 2, vec![1., 0., 0., 1.]);
        let db = db(vec![train], &s);
        let field = NNField {
            layer_name: "l".into(),
            rows: 1,
            cols: 2,
            cells: vec![
                Correspondence {
                    image_id: 0,
                    train_pos: (0, 0),
                    distance: 0.0,
                },
                Correspondence {
                    image_id: 0,
                    train_pos: (0, 2),
                    distance: 1.0 + std::f64::consts::FRAC_1_SQRT_2,
                },
            ],
            eval_count: 2,
        };
        let out = hpm_propagate(&field, &query, &db, &s, Parity::Even).unwrap();
        assert_eq!(out.cells[1].train_pos, (0, 1));
        assert_eq!(out.cells[1].distance, 0.0);
        assert_eq!(out.cells[0], field.cells[0]);
        let odd = hpm_propagate(&field, &query, &db, &s, Parity::Odd).unwrap();
        assert_eq!(odd, out);
    }

    #[test]
    fn propagate_skips_out_of_bounds_proposals() {
        // Both cells match column 0 of a one-column training tensor.
        // The right neighbor proposes column -1 and the left proposes column 1;
        // neither exists.
        let s = spec(1);
        let train = tensor(1, 1, 1, vec![1.]);
        let query = tensor(1, 2, 1, vec![1., 2.]);
        let db = db(vec![train], &s);
        let field = hpm_init(&query, &db, &s, &SearchConfig::new(vec![0])).unwrap();
        let out = hpm_propagate(&field, &query, &db, &s, Parity::Even).unwrap();
        assert_eq!(out.cells, field.cells);
        assert_eq!(out.eval_count, field.eval_count);
    }

    #[test]
    fn zero_iterations_is_init() {
        let s = spec(2);
        let train = tensor(3, 3, 2, (0..18).map(|v| (v as f32).sin()).collect());
        let query = tensor(3, 3, 2, (0..18).map(|v| (v as f32).cos()).collect());
        let db = db(vec![train.clone(), train], &s);
        let config = SearchConfig::new(vec![0, 1]).iterations(0).seed(5);
        let run = hpm_run(&query, &db, &s, &config).unwrap();
        let init = hpm_init(&query, &db, &s, &config).unwrap();
        assert_eq!(run, init);
    }

    #[test]
    fn rejects_foreign_field() {
        let s = spec(1);
        let train = tensor(1, 1, 1, vec![1.]);
        let query = tensor(1, 2, 1, vec![1., 2.]);
        let db = db(vec![train], &s);
        let mut field = hpm_init(&query, &db, &s, &SearchConfig::new(vec![0])).unwrap();
        field.cells[0].image_id = 7;
        assert!(hpm_propagate(&field, &query, &db, &s, Parity::Even).is_err());
    }
}
