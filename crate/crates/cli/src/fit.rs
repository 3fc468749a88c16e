use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fin_core::model::{InducedCoefficients, Monomial};
use fin_core::sampler::{run_chain_with, ChainOptions, ChainOutput};
use fin_core::stats::{equal_tailed_interval, mean, variance};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{KChoice, RunConfig};
use crate::data::{auto_select_k, load_dataset, KSelection, LoadedData};

/// One persisted coefficient of the induced regression.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Main(usize),
    /// Coefficient of `x_a x_b` (`a <= b`), i.e. `2 Omega_X[a, b]` off the diagonal.
    Interaction(usize, usize),
    CovariateInteraction(usize, usize),
    /// Coefficient of a monomial of order three or more.
    Higher(Monomial),
}

impl Term {
    pub fn name(&self, exposures: &[String], covariates: &[String]) -> String {
        match self {
            Term::Main(j) => format!("main:{}", exposures[*j]),
            Term::Interaction(a, b) => format!("int:{}:{}", exposures[*a], exposures[*b]),
            Term::CovariateInteraction(j, c) => format!("covint:{}:{}", exposures[*j], covariates[*c]),
            Term::Higher(m) => {
                let parts: Vec<&str> = m.iter().map(|&j| exposures[j].as_str()).collect();
                format!("int:{}", parts.join(":"))
            }
        }
    }

    pub fn value(&self, c: &InducedCoefficients) -> f64 {
        match self {
            Term::Main(j) => c.beta_x[*j],
            Term::Interaction(a, b) if a == b => c.omega_x[(*a, *a)],
            Term::Interaction(a, b) => 2.0 * c.omega_x[(*a, *b)],
            Term::CovariateInteraction(j, q) => c.covariate_int.as_ref().map_or(0.0, |m| m[(*j, *q)]),
            Term::Higher(m) => c
                .higher_order
                .as_ref()
                .and_then(|h| h.get(&m.len()))
                .and_then(|t| t.get(m))
                .copied()
                .unwrap_or(0.0),
        }
    }

    fn is_interaction(&self) -> bool {
        matches!(self, Term::Interaction(..) | Term::Higher(_))
    }
}

fn multisets(p: usize, m: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Monomial>) {
    if cur.len() == m {
        out.push(cur.clone());
        return;
    }
    for j in start..p {
        cur.push(j);
        multisets(p, m, j, cur, out);
        cur.pop();
    }
}

/// Mains, then pairwise terms, then covariate interactions, then orders
/// `3..=order`.
pub fn terms(p: usize, q: usize, order: usize) -> Vec<Term> {
    let mut out: Vec<Term> = (0..p).map(Term::Main).collect();
    for a in 0..p {
        for b in a..p {
            out.push(Term::Interaction(a, b));
        }
    }
    for j in 0..p {
        for c in 0..q {
            out.push(Term::CovariateInteraction(j, c));
        }
    }
    for m in 3..=order {
        let mut ms = Vec::new();
        multisets(p, m, 0, &mut Vec::new(), &mut ms);
        out.extend(ms.into_iter().map(Term::Higher));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    pub chain: usize,
    pub seed: u64,
    pub accept_rate_eta: f64,
    pub step_size: f64,
    pub ess: BTreeMap<String, f64>,
    pub degenerate: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub k: usize,
    pub k_selection: Option<KSelection>,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    /// Per main effect, summed over chains.
    pub pooled_ess: BTreeMap<String, f64>,
    pub min_pooled_ess: f64,
    pub chains: Vec<ChainDiagnostics>,
    /// Loadings are identified only up to rotation.
    pub lambda_rotation_ambiguous: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub k: usize,
    pub n_draws: usize,
    pub output: PathBuf,
    pub diagnostics: Diagnostics,
}

/// Summary row of one term over the pooled draws.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSummary {
    pub term: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    /// Posterior mean, or zero when the interval covers zero.
    pub point: f64,
}

pub fn summarize(name: String, draws: &[f64], level: f64) -> TermSummary {
    let m = mean(draws);
    let (lower, upper) = equal_tailed_interval(draws, level);
    let point = if lower <= 0.0 && upper >= 0.0 { 0.0 } else { m };
    TermSummary { term: name, mean: m, sd: variance(draws).sqrt(), lower, upper, point }
}

fn write_draws(path: &Path, names: &[String], terms: &[Term], chains: &[ChainOutput]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "draw".to_string(), "intercept".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (c, out) in chains.iter().enumerate() {
        for (d, draw) in out.induced_draws.iter().enumerate() {
            let mut rec = vec![c.to_string(), d.to_string(), draw.intercept.to_string()];
            rec.extend(terms.iter().map(|t| t.value(draw).to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, rows: &[TermSummary]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["term", "mean", "sd", "lower", "upper", "point"])?;
    for r in rows {
        w.write_record([
            r.term.clone(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.point.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_imputed(path: &Path, data: &LoadedData, chains: &[ChainOutput]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "column", "mean"])?;
    let first = &chains[0].imputed_means;
    for (idx, &(i, j, _)) in first.iter().enumerate() {
        let m = chains.iter().map(|c| c.imputed_means[idx].2).sum::<f64>() / chains.len() as f64;
        w.write_record([(i + 1).to_string(), data.exposure_names[j].clone(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_lambda(path: &Path, data: &LoadedData, k: usize, chains: &[ChainOutput]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    for name in &data.exposure_names {
        for h in 0..k {
            header.push(format!("lambda:{name}:{}", h + 1));
        }
    }
    w.write_record(&header)?;
    for (c, out) in chains.iter().enumerate() {
        for (d, l) in out.lambda_draws.iter().flatten().enumerate() {
            let mut rec = vec![c.to_string(), d.to_string()];
            for j in 0..l.nrows() {
                rec.extend((0..k).map(|h| l[(j, h)].to_string()));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads the data, resolves `k`, runs `n_chains` chains in parallel with
/// seeds `seed, seed + 1, ...` and writes draws, summaries, diagnostics and
/// the resolved configuration to `config.output`.
pub fn run(config: &RunConfig) -> anyhow::Result<RunSummary> {
    config.validate()?;
    let data = load_dataset(config)?;
    let p = data.dataset.p();
    let (k, k_selection) = match config.k {
        KChoice::Auto => {
            let sel = auto_select_k(&data, config.k_threshold)?;
            (sel.k, Some(sel))
        }
        KChoice::Fixed(k) => {
            if k > p {
                warn!("k = {k} exceeds the number of exposures p = {p}");
            }
            (k, None)
        }
    };
    let hyper = config.resolved_sampler(k);
    hyper.validate()?;
    let opts = ChainOptions { record_lambda: config.record_lambda, ..Default::default() };
    info!("running {} chain(s) with k = {k}", config.n_chains);
    let chains: Vec<ChainOutput> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut h = hyper.clone();
            h.seed = hyper.seed.wrapping_add(c as u64);
            run_chain_with(&data.dataset, &h, &opts).with_context(|| format!("chain {c} (seed {})", h.seed))
        })
        .collect::<anyhow::Result<_>>()?;

    let order = match hyper.response {
        fin_core::sampler::ResponseModel::Polynomial { order } => order,
        fin_core::sampler::ResponseModel::Quadratic => 2,
    };
    let q = data.covariate_names.len();
    let terms = terms(p, q, order);
    let names: Vec<String> = terms.iter().map(|t| t.name(&data.exposure_names, &data.covariate_names)).collect();
    let pooled: Vec<&InducedCoefficients> = chains.iter().flat_map(|c| c.induced_draws.iter()).collect();
    let rows: Vec<TermSummary> = terms
        .par_iter()
        .zip(names.par_iter())
        .map(|(t, n)| {
            let d: Vec<f64> = pooled.iter().map(|c| t.value(c)).collect();
            let level = if t.is_interaction() { config.interaction_level() } else { config.level };
            summarize(n.clone(), &d, level)
        })
        .collect();

    let mut pooled_ess: BTreeMap<String, f64> = BTreeMap::new();
    let chain_diag: Vec<ChainDiagnostics> = chains
        .iter()
        .enumerate()
        .map(|(c, out)| {
            let mut ess = BTreeMap::new();
            let mut degenerate = Vec::new();
            for (j, e) in out.ess.iter().enumerate() {
                let name = data.exposure_names[j].clone();
                *pooled_ess.entry(name.clone()).or_insert(0.0) += e.ess;
                if e.degenerate {
                    degenerate.push(name.clone());
                }
                ess.insert(name, e.ess);
            }
            ChainDiagnostics {
                chain: c,
                seed: hyper.seed.wrapping_add(c as u64),
                accept_rate_eta: out.accept_rate_eta,
                step_size: out.step_size,
                ess,
                degenerate,
            }
        })
        .collect();
    let min_pooled_ess = pooled_ess.values().copied().fold(f64::INFINITY, f64::min);
    let diagnostics = Diagnostics {
        k,
        k_selection,
        n_chains: config.n_chains,
        draws_per_chain: hyper.n_kept(),
        pooled_ess,
        min_pooled_ess,
        chains: chain_diag,
        lambda_rotation_ambiguous: config.record_lambda,
    };

    let dir = &config.output;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_draws(&dir.join("draws.csv"), &names, &terms, &chains)?;
    write_summary(&dir.join("summary.csv"), &rows)?;
    fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&diagnostics)?)?;
    fs::write(dir.join("transform.json"), serde_json::to_string_pretty(&data.transform)?)?;
    let mut resolved = config.clone();
    resolved.k = KChoice::Fixed(k);
    resolved.sampler.k = k;
    fs::write(dir.join("config.toml"), toml::to_string(&resolved)?)?;
    if !data.dataset.is_complete() {
        write_imputed(&dir.join("imputed.csv"), &data, &chains)?;
    }
    if config.record_lambda {
        write_lambda(&dir.join("lambda.csv"), &data, k, &chains)?;
    }
    info!("wrote results to {}", dir.display());
    Ok(RunSummary { k, n_draws: pooled.len(), output: dir.clone(), diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn term_counts() {
        assert_eq!(terms(4, 0, 2).len(), 4 + 10);
        assert_eq!(terms(4, 2, 2).len(), 4 + 10 + 8);
        // C(6, 3) multisets of size 3 from 4 items
        assert_eq!(terms(4, 0, 3).len(), 4 + 10 + 20);
    }

    #[test]
    fn interaction_values_use_monomial_coefficients() {
        let mut c = InducedCoefficients::zeros(2);
        c.beta_x = DVector::from_vec(vec![1.0, 2.0]);
        c.omega_x = DMatrix::from_row_slice(2, 2, &[3.0, 0.25, 0.25, 5.0]);
        assert_eq!(Term::Main(1).value(&c), 2.0);
        assert_eq!(Term::Interaction(0, 0).value(&c), 3.0);
        assert_eq!(Term::Interaction(0, 1).value(&c), 0.5);
        assert_eq!(Term::Higher(vec![0, 0, 1]).value(&c), 0.0);
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(Term::Interaction(0, 1).name(&names, &[]), "int:a:b");
        assert_eq!(Term::CovariateInteraction(1, 0).name(&names, &["age".into()]), "covint:b:age");
        assert_eq!(Term::Higher(vec![0, 1, 1]).name(&names, &[]), "int:a:b:b");
    }

    #[test]
    fn summary_zeroes_intervals_covering_zero() {
        let pos: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let s = summarize("x".into(), &pos, 0.95);
        assert_eq!(s.point, 50.5);
        let sym: Vec<f64> = (-50..=50).map(|i| i as f64).collect();
        assert_eq!(summarize("y".into(), &sym, 0.95).point, 0.0);
    }
}
