//! Island-model genetic programming over sine, addition, subtraction and
//! multiplication.

mod expr;

pub use expr::{Expr, ExpressionTree, Samples};

use std::collections::BTreeMap;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymregConfig {
    pub islands: usize,
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub parsimony: f64,
    pub migration_interval: usize,
    /// Elites sent to the next island at each migration.
    pub migrants: usize,
    /// Round-robin sweeps over the constants per optimization call.
    pub constant_steps: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for SymregConfig {
    fn default() -> Self {
        Self {
            islands: 4,
            population: 200,
            generations: 200,
            tournament: 5,
            mutation: 0.3,
            crossover: 0.6,
            parsimony: 1e-4,
            migration_interval: 20,
            migrants: 5,
            constant_steps: 5,
            max_depth: 10,
            seed: 0,
        }
    }
}

impl SymregConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("islands", self.islands),
            ("population", self.population),
            ("generations", self.generations),
            ("tournament", self.tournament),
            ("migration_interval", self.migration_interval),
            ("constant_steps", self.constant_steps),
            ("max_depth", self.max_depth),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("symreg {name} must be >= 1")));
            }
        }
        let p = [self.mutation, self.crossover];
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || self.mutation + self.crossover > 1.0 {
            return Err(Error::Config("mutation and crossover must be probabilities summing to <= 1".into()));
        }
        if !(self.parsimony >= 0.0) {
            return Err(Error::Config("parsimony must be >= 0".into()));
        }
        if self.migrants >= self.population {
            return Err(Error::Config("migrants must be fewer than the population size".into()));
        }
        Ok(())
    }
}

/// Best expression found at one complexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub complexity: usize,
    pub mse: f64,
    pub expression: ExpressionTree,
}

/// Expressions with strictly decreasing training loss as complexity grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub entries: Vec<FrontEntry>,
}

impl ParetoFront {
    fn from_candidates(mut cands: Vec<FrontEntry>) -> Self {
        cands.sort_by(|a, b| a.complexity.cmp(&b.complexity).then(a.mse.total_cmp(&b.mse)));
        let mut entries: Vec<FrontEntry> = Vec::new();
        for c in cands {
            if entries.last().is_none_or(|l| c.mse < l.mse) {
                entries.push(c);
            }
        }
        Self { entries }
    }

    /// Lowest-loss entry.
    pub fn best(&self) -> &FrontEntry {
        self.entries.last().expect("front is never empty")
    }

    /// Entry minimizing `mse + parsimony * complexity`.
    pub fn select(&self, parsimony: f64) -> &FrontEntry {
        self.entries
            .iter()
            .min_by(|a, b| {
                let fa = a.mse + parsimony * a.complexity as f64;
                let fb = b.mse + parsimony * b.complexity as f64;
                fa.total_cmp(&fb)
            })
            .expect("front is never empty")
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    if s.is_finite() {
        s / target.len() as f64
    } else {
        f64::INFINITY
    }
}

const GOLDEN: f64 = 1.618_033_988_749_895;

/// Minimizes `f` along one coordinate starting at `x0`: downhill bracket
/// expansion followed by golden-section search.
fn line_minimize(f: &mut impl FnMut(f64) -> f64, x0: f64, f0: f64) -> (f64, f64) {
    let h = 0.1 * x0.abs().max(1.0);
    let (mut a, mut b) = (x0, x0 + h);
    let mut fb = f(b);
    if fb > f0 {
        std::mem::swap(&mut a, &mut b);
        fb = f0;
    }
    let mut c = b + GOLDEN * (b - a);
    let mut fc = f(c);
    let mut guard = 0;
    while fc < fb && guard < 60 {
        a = b;
        b = c;
        fb = fc;
        c = b + GOLDEN * (b - a);
        fc = f(c);
        guard += 1;
    }
    golden(f, a, b, c, fb).min_by_value((x0, f0))
}

trait MinByValue {
    fn min_by_value(self, other: (f64, f64)) -> (f64, f64);
}

impl MinByValue for (f64, f64) {
    fn min_by_value(self, other: (f64, f64)) -> (f64, f64) {
        if self.1 < other.1 {
            self
        } else {
            other
        }
    }
}

/// Golden-section search on the bracket `a < b < c` (in either order)
/// with `f(b) = fb` below both ends.
fn golden(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, c: f64, fb: f64) -> (f64, f64) {
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let (mut best, mut fbest) = (b, fb);
    let r = 1.0 / GOLDEN;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..100 {
        if hi - lo <= 1e-12 * (1.0 + best.abs()) {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
        for (x, fx) in [(x1, f1), (x2, f2)] {
            if fx < fbest {
                best = x;
                fbest = fx;
            }
        }
    }
    (best, fbest)
}

/// Coordinate search over the constants of `root`, never increasing
/// `objective`.
fn tune_constants(root: &Expr, steps: usize, objective: &mut impl FnMut(&Expr) -> f64) -> (Expr, f64) {
    let mut e = root.clone();
    let mut consts = e.constants();
    let mut current = objective(&e);
    if consts.is_empty() || !current.is_finite() {
        return (e, current);
    }
    for _ in 0..steps {
        let before = current;
        for i in 0..consts.len() {
            let mut trial = e.clone();
            let mut vals = consts.clone();
            let mut f = |v: f64| {
                vals[i] = v;
                trial.set_constants(&vals);
                let r = objective(&trial);
                if r.is_finite() {
                    r
                } else {
                    f64::INFINITY
                }
            };
            let (v, fv) = line_minimize(&mut f, consts[i], current);
            if fv < current {
                consts[i] = v;
                current = fv;
                e.set_constants(&consts);
            }
        }
        if current >= before * (1.0 - 1e-12) {
            break;
        }
    }
    (e, current)
}

/// Tunes the constants of `tree` to lower its mean squared error on
/// `(samples, target)`; the error never increases.
pub fn optimize_constants(tree: &ExpressionTree, samples: &Samples, target: &[f64], steps: usize) -> Result<ExpressionTree> {
    let cols = bind(tree, samples)?;
    let n = samples.len();
    let (root, _) = tune_constants(&tree.root, steps, &mut |e| mse(&e.eval(&cols, n), target));
    Ok(ExpressionTree {
        variables: tree.variables.clone(),
        root,
    })
}

fn bind<'a>(tree: &ExpressionTree, samples: &'a Samples) -> Result<Vec<&'a [f64]>> {
    tree.variables
        .iter()
        .map(|v| samples.column(v).ok_or_else(|| Error::UnboundVariable(v.clone())))
        .collect()
}

/// Mean squared error after the best affine rescaling `a * f + b`.
fn scaled_error(pred: &[f64], target: &[f64]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let pm = pred.iter().sum::<f64>() / n;
    let tm = target.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (p, t) in pred.iter().zip(target) {
        cov += (p - pm) * (t - tm);
        var += (p - pm) * (p - pm);
    }
    if !(cov.is_finite() && var.is_finite()) {
        return (f64::INFINITY, 0.0, 0.0);
    }
    let a = if var > 1e-12 * n { cov / var } else { 0.0 };
    let b = tm - a * pm;
    let err = pred.iter().zip(target).map(|(p, t)| (t - a * p - b).powi(2)).sum::<f64>() / n;
    (err, a, b)
}

#[derive(Clone)]
struct Individual {
    expr: Expr,
    error: f64,
    fitness: f64,
}

struct Problem<'a> {
    cols: Vec<&'a [f64]>,
    n: usize,
    target: &'a [f64],
    vars: usize,
    cfg: &'a SymregConfig,
}

impl Problem<'_> {
    fn scaled(&self, e: &Expr) -> f64 {
        let pred = e.eval(&self.cols, self.n);
        if pred.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        scaled_error(&pred, self.target).0
    }

    fn individual(&self, expr: Expr) -> Individual {
        let error = self.scaled(&expr);
        let fitness = error + self.cfg.parsimony * expr.complexity() as f64;
        Individual { expr, error, fitness }
    }

    fn terminal(&self, rng: &mut ChaCha8Rng) -> Expr {
        if rng.random::<f64>() < 0.7 {
            Expr::Var(rng.random_range(0..self.vars))
        } else {
            Expr::Const(rng.random_range(-2.0..2.0))
        }
    }

    fn random_tree(&self, depth: usize, full: bool, rng: &mut ChaCha8Rng) -> Expr {
        if depth <= 1 || (!full && rng.random::<f64>() < 0.3) {
            return self.terminal(rng);
        }
        let op = rng.random_range(0..4);
        let a = self.random_tree(depth - 1, full, rng);
        if op == 0 {
            return Expr::sin(a);
        }
        let b = self.random_tree(depth - 1, full, rng);
        match op {
            1 => Expr::add(a, b),
            2 => Expr::sub(a, b),
            _ => Expr::mul(a, b),
        }
    }

    fn mutate(&self, e: &Expr, rng: &mut ChaCha8Rng) -> Expr {
        let mut out = e.clone();
        let idx = rng.random_range(0..out.complexity());
        let node = out.node_mut(idx);
        if rng.random::<f64>() < 0.5 {
            *node = self.random_tree(rng.random_range(1..=3), false, rng);
            return out;
        }
        *node = match std::mem::replace(node, Expr::Const(0.0)) {
            Expr::Const(c) => {
                if rng.random::<f64>() < 0.7 {
                    Expr::Const(c + rng.random_range(-0.5..0.5) * c.abs().max(1.0))
                } else {
                    self.terminal(rng)
                }
            }
            Expr::Var(_) => self.terminal(rng),
            Expr::Sin(a) => *a,
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => match rng.random_range(0..3) {
                0 => Expr::Add(a, b),
                1 => Expr::Sub(a, b),
                _ => Expr::Mul(a, b),
            },
        };
        out
    }

    fn crossover(&self, a: &Expr, b: &Expr, rng: &mut ChaCha8Rng) -> Expr {
        let mut out = a.clone();
        let donor = b.node(rng.random_range(0..b.complexity())).clone();
        *out.node_mut(rng.random_range(0..out.complexity())) = donor;
        out
    }

    fn tournament<'p>(&self, pop: &'p [Individual], rng: &mut ChaCha8Rng) -> &'p Individual {
        let mut best = rng.random_range(0..pop.len());
        for _ in 1..self.cfg.tournament {
            let c = rng.random_range(0..pop.len());
            if pop[c].fitness < pop[best].fitness || (pop[c].fitness == pop[best].fitness && c < best) {
                best = c;
            }
        }
        &pop[best]
    }
}

fn best_index(pop: &[Individual]) -> usize {
    let mut best = 0;
    for (i, ind) in pop.iter().enumerate() {
        if ind.fitness < pop[best].fitness {
            best = i;
        }
    }
    best
}

/// Writes `a * f + b` using only the allowed operators, dropping whichever
/// of the scale and offset does not pay for its nodes.
fn materialize(p: &Problem<'_>, e: &Expr) -> Expr {
    let pred = e.eval(&p.cols, p.n);
    let (_, a, b) = scaled_error(&pred, p.target);
    let (_, _, b_only) = {
        let n = pred.len() as f64;
        let off = p.target.iter().zip(&pred).map(|(t, f)| t - f).sum::<f64>() / n;
        (0.0, 1.0, off)
    };
    let a_only = {
        let num: f64 = pred.iter().zip(p.target).map(|(f, t)| f * t).sum();
        let den: f64 = pred.iter().map(|f| f * f).sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let candidates = [
        e.clone(),
        Expr::add(e.clone(), Expr::Const(b_only)),
        Expr::mul(Expr::Const(a_only), e.clone()),
        Expr::add(Expr::mul(Expr::Const(a), e.clone()), Expr::Const(b)),
        Expr::Const(p.target.iter().sum::<f64>() / p.n as f64),
    ];
    let score = |c: &Expr| mse(&c.eval(&p.cols, p.n), p.target) + p.cfg.parsimony * c.complexity() as f64;
    candidates
        .into_iter()
        .map(|c| {
            let s = score(&c);
            (c, s)
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(c, _)| c)
        .expect("candidates are non-empty")
}

/// Runs the island GP and returns the Pareto front of plain (unscaled)
/// expressions over the variables of `samples`.
pub fn fit(samples: &Samples, target: &[f64], cfg: &SymregConfig) -> Result<ParetoFront> {
    cfg.validate()?;
    let n = samples.len();
    if target.len() != n {
        return Err(Error::SampleMismatch {
            left: n,
            right: target.len(),
        });
    }
    if n < 50 {
        return Err(Error::Config(format!("symbolic regression needs at least 50 samples, got {n}")));
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("regression targets must be finite".into()));
    }
    if samples.names.is_empty() {
        return Err(Error::Config("symbolic regression needs at least one input variable".into()));
    }
    let p = Problem {
        cols: samples.columns.iter().map(Vec::as_slice).collect(),
        n,
        target,
        vars: samples.names.len(),
        cfg,
    };
    let tm = target.iter().sum::<f64>() / n as f64;
    let variance = target.iter().map(|t| (t - tm).powi(2)).sum::<f64>() / n as f64;
    let exact = 1e-14 * variance.max(1e-300);

    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.islands)
        .map(|i| ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d)))
        .collect();
    let mut islands: Vec<Vec<Individual>> = rngs
        .iter_mut()
        .map(|rng| {
            (0..cfg.population)
                .map(|j| {
                    let depth = 2 + j % 4;
                    p.individual(p.random_tree(depth, j % 2 == 0, rng))
                })
                .collect()
        })
        .collect();

    // Best scaled error seen at each raw complexity.
    let mut archive: BTreeMap<usize, Individual> = BTreeMap::new();
    let record = |archive: &mut BTreeMap<usize, Individual>, pop: &[Individual]| {
        for ind in pop {
            if !ind.error.is_finite() {
                continue;
            }
            let slot = archive.entry(ind.expr.complexity()).or_insert_with(|| ind.clone());
            if ind.error < slot.error {
                *slot = ind.clone();
            }
        }
    };
    for pop in &islands {
        record(&mut archive, pop);
    }

    for gen in 1..=cfg.generations {
        for (pop, rng) in islands.iter_mut().zip(rngs.iter_mut()) {
            let elite = pop[best_index(pop)].clone();
            let mut next = Vec::with_capacity(cfg.population);
            next.push(elite);
            while next.len() < cfg.population {
                let r: f64 = rng.random();
                let parent = p.tournament(pop, rng);
                let child = if r < cfg.crossover {
                    let other = p.tournament(pop, rng);
                    p.crossover(&parent.expr, &other.expr, rng)
                } else if r < cfg.crossover + cfg.mutation {
                    p.mutate(&parent.expr, rng)
                } else {
                    next.push(parent.clone());
                    continue;
                };
                if child.depth() > cfg.max_depth {
                    next.push(parent.clone());
                } else {
                    next.push(p.individual(child));
                }
            }
            if gen % 10 == 0 {
                let b = best_index(&next);
                let (tuned, _) = tune_constants(&next[b].expr, cfg.constant_steps, &mut |e| p.scaled(e));
                next[b] = p.individual(tuned);
            }
            *pop = next;
        }
        if gen % cfg.migration_interval == 0 && cfg.islands > 1 {
            let elites: Vec<Vec<Individual>> = islands
                .iter()
                .map(|pop| {
                    let mut idx: Vec<usize> = (0..pop.len()).collect();
                    idx.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)));
                    idx[..cfg.migrants].iter().map(|&i| pop[i].clone()).collect()
                })
                .collect();
            for (i, incoming) in elites.into_iter().enumerate() {
                let dst = &mut islands[(i + 1) % cfg.islands];
                let mut idx: Vec<usize> = (0..dst.len()).collect();
                idx.sort_by(|&a, &b| dst[b].fitness.total_cmp(&dst[a].fitness).then(a.cmp(&b)));
                for (slot, ind) in idx.into_iter().zip(incoming) {
                    dst[slot] = ind;
                }
            }
        }
        for pop in &islands {
            record(&mut archive, pop);
        }
        let best = archive.values().map(|i| i.error).fold(f64::INFINITY, f64::min);
        if gen % 20 == 0 {
            debug!("symreg generation {gen}: best scaled mse {best:.3e}");
        }
        if best <= exact {
            debug!("symreg stopped at generation {gen}: exact fit");
            break;
        }
    }

    if archive.is_empty() {
        return Err(Error::NoValidExpression);
    }
    let mut cands = Vec::with_capacity(archive.len());
    for ind in archive.values() {
        let plain = materialize(&p, &ind.expr);
        let (tuned, _) = tune_constants(&plain, cfg.constant_steps, &mut |e| mse(&e.eval(&p.cols, n), target));
        let simple = tuned.simplified();
        let err = mse(&simple.eval(&p.cols, n), target);
        if err.is_finite() {
            cands.push(FrontEntry {
                complexity: simple.complexity(),
                mse: err,
                expression: ExpressionTree {
                    variables: samples.names.clone(),
                    root: simple,
                },
            });
        }
    }
    if cands.is_empty() {
        return Err(Error::NoValidExpression);
    }
    Ok(ParetoFront::from_candidates(cands))
}
