use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use mdp_stability::bisim::{
    align_reward_scale, bisim_quotient, cross_bisim_metric, hausdorff_of, BisimConfig,
};
use mdp_stability::mdp::{greedy_policy, induce_chain, value_iteration, MdpDocument, MdpSpec, Policy};
use mdp_stability::onpolicy::{analyze, make_toy_policy, rate_of_decrease_check, EmbeddedMdp, SoftmaxPolicy};
use mdp_stability::safety::{
    certify_safety, safety_frontier, state_hitting_times, stochastic_probe, verify_stability_instance, SafetyQuery,
    StartDistribution, DEFAULT_ENUMERATION_CAP,
};
use mdp_stability::scenarios::{
    build_duplicated, build_playing_dead, build_uniform_shutdown, playing_dead_distance_bound, playing_dead_fixture,
    random_document, random_perturbation, uniform_shutdown_perturbation, PlayingDeadParams, RandomFamily,
};

use crate::report::{cell, num, Report, Status};
use crate::{Command, MetricArgs, SafetyArgs};

pub fn execute(cmd: &Command) -> Result<Report> {
    match cmd {
        Command::Validate { path } => validate(path),
        Command::Bisim { path1, path2, metric } => bisim(path1, path2, metric),
        Command::Align {
            path1,
            path2,
            grid,
            metric,
        } => align(path1, path2, *grid, metric),
        Command::Quotient { path, merge_tol, metric } => quotient(path, *merge_tol, metric),
        Command::Certify {
            path,
            safety,
            big_n,
            probe,
            seed,
        } => certify(path, safety, *big_n, *probe, *seed),
        Command::Frontier {
            path,
            epsilons,
            value_tol,
        } => frontier(path, epsilons, *value_tol),
        Command::HittingTime { path, policy, start } => hitting_time(path, policy, start),
        Command::PlayingDead {
            base,
            escape_state,
            escape_action,
            gamma,
            epsilon,
            delta,
            write_base,
        } => playing_dead(
            base.as_deref(),
            escape_state.as_deref(),
            escape_action.as_deref(),
            *gamma,
            *epsilon,
            *delta,
            write_base.as_deref(),
        ),
        Command::UniformShutdown { path, big_n } => uniform_shutdown(path, *big_n),
        Command::Duplicate { path, state, copies } => duplicate(path, state, *copies),
        Command::Random {
            seed,
            states,
            actions,
            dim,
            sparsity,
            gamma,
        } => random(*seed, *states, *actions, *dim, *sparsity, *gamma),
        Command::Onpolicy { path, policy, start } => onpolicy(path, policy.as_deref(), start),
        Command::OnpolicySweep {
            path,
            policy,
            sizes,
            seed,
            threshold,
            big_n,
            start,
        } => onpolicy_sweep(path, policy.as_deref(), sizes, *seed, *threshold, *big_n, start),
        Command::StabilityExperiment {
            path,
            epsilon,
            big_n,
            sizes,
            seed,
            perturbed,
            metric,
        } => stability_experiment(path, *epsilon, *big_n, sizes, *seed, perturbed.as_deref(), metric),
    }
}

fn read_document(path: &Path) -> Result<MdpDocument> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_mdp(path: &Path) -> Result<MdpSpec> {
    read_document(path)?
        .into_mdp()
        .with_context(|| format!("loading {}", path.display()))
}

fn read_embedded(path: &Path) -> Result<EmbeddedMdp> {
    EmbeddedMdp::from_document(read_document(path)?).with_context(|| format!("loading {}", path.display()))
}

fn document_value(doc: &MdpDocument) -> Result<Value> {
    Ok(serde_json::to_value(doc)?)
}

fn metric_config(args: &MetricArgs, gamma: f64) -> Result<BisimConfig> {
    let config = BisimConfig::new(
        args.c_r.unwrap_or(1.0 - gamma),
        args.c_t.unwrap_or(gamma),
        args.tol,
    )?
    .with_max_iterations(args.max_iterations);
    config.check()?;
    Ok(config)
}

fn state_index(mdp: &MdpSpec, id: &str) -> Result<usize> {
    mdp.state_index(id)
        .with_context(|| format!("unknown state {id:?}"))
}

/// `uniform` over non-safe states, or a point mass on a state id.
fn start_distribution(mdp: &MdpSpec, spec: &str) -> Result<StartDistribution> {
    let n = mdp.n_states();
    if spec == "uniform" {
        let free = mdp.non_safe();
        if free.is_empty() {
            bail!("every state is safe; pass a state id as --start");
        }
        let mut weights = vec![0.0; n];
        for &s in &free {
            weights[s] = 1.0 / free.len() as f64;
        }
        return Ok(StartDistribution::new(weights)?);
    }
    let s = state_index(mdp, spec)?;
    let point = StartDistribution::point(n, s);
    Ok(if mdp.is_safe(s) { point.allowing_safe() } else { point })
}

fn validate(path: &Path) -> Result<Report> {
    let doc = read_document(path)?;
    let report = doc.validate();
    let rows = report
        .violations
        .iter()
        .map(|v| {
            let value = serde_json::to_value(v)?;
            let kind = value["kind"].as_str().unwrap_or_default().to_string();
            Ok(vec![kind, value.to_string()])
        })
        .collect::<Result<Vec<_>>>()?;
    let status = if report.is_valid() { Status::Ok } else { Status::Negative };
    Ok(Report::new(json!({
        "path": path.display().to_string(),
        "valid": report.is_valid(),
        "violations": report.violations,
    }))
    .with_table(vec!["kind", "detail"], rows)
    .with_status(status))
}

fn bisim(path1: &Path, path2: &Path, args: &MetricArgs) -> Result<Report> {
    let (m1, m2) = (read_mdp(path1)?, read_mdp(path2)?);
    let config = metric_config(args, m1.discount())?;
    let metric = cross_bisim_metric(&m1, &m2, &config)?;
    let d_h = hausdorff_of(&metric.dist);
    let mut rows = Vec::new();
    for (i, s1) in m1.state_ids().iter().enumerate() {
        for (j, s2) in m2.state_ids().iter().enumerate() {
            rows.push(vec![s1.clone(), s2.clone(), cell(metric.dist[i][j])]);
        }
    }
    let status = if metric.converged { Status::Ok } else { Status::NotConverged };
    Ok(Report::new(json!({
        "states1": m1.state_ids(),
        "states2": m2.state_ids(),
        "metric": metric,
        "hausdorff": num(d_h),
    }))
    .with_table(vec!["state1", "state2", "distance"], rows)
    .with_status(status))
}

fn align(path1: &Path, path2: &Path, grid: usize, args: &MetricArgs) -> Result<Report> {
    let (m1, m2) = (read_mdp(path1)?, read_mdp(path2)?);
    let config = metric_config(args, m1.discount())?;
    let result = align_reward_scale(&m1, &m2, &config, grid)?;
    let rows = result.profile.iter().map(|&(h, d)| vec![cell(h), cell(d)]).collect();
    Ok(Report::new(serde_json::to_value(&result)?).with_table(vec!["h", "distance"], rows))
}

fn quotient(path: &Path, merge_tol: f64, args: &MetricArgs) -> Result<Report> {
    let mdp = read_mdp(path)?;
    let config = metric_config(args, mdp.discount())?;
    let result = bisim_quotient(&mdp, merge_tol, &config)?;
    let rows = mdp
        .state_ids()
        .iter()
        .zip(&result.lift)
        .map(|(id, &c)| vec![id.clone(), c.to_string(), result.quotient.state_ids()[c].clone()])
        .collect();
    Ok(Report::new(serde_json::to_value(&result)?).with_table(vec!["state", "class", "representative"], rows))
}

fn safety_query(mdp: &MdpSpec, args: &SafetyArgs) -> Result<SafetyQuery> {
    let mut query = SafetyQuery::worst_case(args.epsilon);
    query.value_tol = args.value_tol;
    if args.start != "worst" {
        query = query.with_start(start_distribution(mdp, &args.start)?);
    }
    query.check()?;
    Ok(query)
}

fn certify(path: &Path, args: &SafetyArgs, big_n: Option<f64>, probe: usize, seed: u64) -> Result<Report> {
    let mdp = read_mdp(path)?;
    let mut query = safety_query(&mdp, args)?;
    if let Some(n) = big_n {
        query = query.with_horizons(vec![n]);
    }
    let cert = certify_safety(&mdp, &query)?;
    let mut out = json!({
        "states": mdp.state_ids(),
        "certificate": cert,
        "worst_start_id": cert.worst_start.map(|s| mdp.state_ids()[s].clone()),
    });
    if probe > 0 {
        out["probe"] = serde_json::to_value(stochastic_probe(&mdp, &query, probe, seed)?)?;
    }
    let status = match big_n {
        Some(n) if !cert.is_safe(n) => Status::Negative,
        _ => Status::Ok,
    };
    let rows = vec![vec![
        cell(cert.epsilon),
        cell(cert.worst_time),
        cert.epsilon_optimal_count.to_string(),
        big_n.map(cell).unwrap_or_default(),
        big_n.map(|n| cert.is_safe(n).to_string()).unwrap_or_default(),
    ]];
    Ok(Report::new(out)
        .with_table(vec!["epsilon", "worst_time", "epsilon_optimal_count", "big_n", "safe"], rows)
        .with_status(status))
}

fn frontier(path: &Path, epsilons: &[f64], value_tol: f64) -> Result<Report> {
    let mdp = read_mdp(path)?;
    let mut sorted = epsilons.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let points = safety_frontier(&mdp, &sorted, value_tol, DEFAULT_ENUMERATION_CAP)?;
    let rows = points
        .iter()
        .map(|p| vec![cell(p.epsilon), cell(p.worst_time), p.epsilon_optimal_count.to_string()])
        .collect();
    Ok(Report::new(json!({ "frontier": points }))
        .with_table(vec!["epsilon", "worst_time", "epsilon_optimal_count"], rows))
}

fn parse_policy(mdp: &MdpSpec, spec: &str) -> Result<Policy> {
    if spec == "greedy" {
        let values = value_iteration(mdp, 1e-12)?.values;
        return Ok(greedy_policy(mdp, &values));
    }
    let table = spec
        .split(',')
        .map(|id| {
            mdp.action_index(id.trim())
                .with_context(|| format!("unknown action {id:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let policy = Policy::Deterministic(table);
    policy.check(mdp)?;
    Ok(policy)
}

fn hitting_time(path: &Path, policy: &str, start: &str) -> Result<Report> {
    let mdp = read_mdp(path)?;
    let policy = parse_policy(&mdp, policy)?;
    let chain = induce_chain(&mdp, &policy)?;
    let times = state_hitting_times(&chain)?;
    let (time, start_state) = if start == "worst" {
        let worst = chain
            .index_map
            .iter()
            .copied()
            .max_by(|&a, &b| times[a].total_cmp(&times[b]).then(b.cmp(&a)));
        (worst.map_or(0.0, |s| times[s]), worst)
    } else {
        let dist = start_distribution(&mdp, start)?;
        (mdp_stability::safety::hitting_time(&chain, &dist)?, None)
    };
    let rows = mdp
        .state_ids()
        .iter()
        .zip(&times)
        .map(|(id, &t)| vec![id.clone(), cell(t)])
        .collect();
    Ok(Report::new(json!({
        "policy": policy,
        "start": start,
        "time": num(time),
        "worst_start_id": start_state.map(|s| mdp.state_ids()[s].clone()),
        "state_times": times.iter().map(|&t| num(t)).collect::<Vec<_>>(),
        "states": mdp.state_ids(),
    }))
    .with_table(vec!["state", "time"], rows))
}

#[allow(clippy::too_many_arguments)]
fn playing_dead(
    base: Option<&Path>,
    escape_state: Option<&str>,
    escape_action: Option<&str>,
    gamma: f64,
    epsilon: f64,
    delta: f64,
    write_base: Option<&Path>,
) -> Result<Report> {
    let params = match base {
        None => {
            let mut params = playing_dead_fixture(gamma, epsilon, delta)?;
            if let Some(id) = escape_state {
                params.escape_state = state_index(&params.base, id)?;
            }
            if let Some(id) = escape_action {
                params.escape_action = params
                    .base
                    .action_index(id)
                    .with_context(|| format!("unknown action {id:?}"))?;
            }
            params
        }
        Some(path) => {
            let base = read_mdp(path)?;
            let vstar = value_iteration(&base, 1e-12)?.values;
            let escape_state = match escape_state {
                Some(id) => state_index(&base, id)?,
                None => base
                    .non_safe()
                    .into_iter()
                    .find(|&s| vstar[s] > 0.0)
                    .context("base has no non-safe state with positive optimal value")?,
            };
            let escape_action = match escape_action {
                Some(id) => base.action_index(id).with_context(|| format!("unknown action {id:?}"))?,
                None => 0,
            };
            PlayingDeadParams {
                base,
                delta,
                escape_state,
                escape_action,
                epsilon,
            }
        }
    };
    let m_prime = build_playing_dead(&params)?;
    if let Some(path) = write_base {
        fs::write(path, params.base.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!(
        "distance bound between the terminal and playing-dead states: {:e}",
        playing_dead_distance_bound(params.base.discount(), params.delta)
    );
    Ok(Report::new(document_value(&m_prime.to_document())?))
}

fn uniform_shutdown(path: &Path, big_n: f64) -> Result<Report> {
    let doc = read_document(path)?;
    let (embedding, side_info) = (doc.embedding.clone(), doc.side_info.clone());
    let mdp = doc.into_mdp()?;
    let mut out = build_uniform_shutdown(&mdp, big_n)?.to_document();
    out.embedding = embedding;
    out.side_info = side_info;
    Ok(Report::new(document_value(&out)?))
}

fn duplicate(path: &Path, state: &str, copies: usize) -> Result<Report> {
    let doc = read_document(path)?;
    let (embedding, side_info) = (doc.embedding.clone(), doc.side_info.clone());
    let mdp = doc.into_mdp()?;
    let s = state_index(&mdp, state)?;
    let mut out = build_duplicated(&mdp, s, copies)?.to_document();
    out.embedding = embedding.map(|mut e| {
        let row = e[s].clone();
        e.extend(std::iter::repeat_n(row, copies - 1));
        e
    });
    out.side_info = side_info.map(|mut info| {
        let tag = info[s].clone();
        info.extend(std::iter::repeat_n(tag, copies - 1));
        info
    });
    Ok(Report::new(document_value(&out)?))
}

fn random(seed: u64, states: usize, actions: usize, dim: usize, sparsity: f64, gamma: f64) -> Result<Report> {
    let mut family = RandomFamily::new(states, actions, dim);
    family.sparsity = sparsity;
    family.discount = gamma;
    Ok(Report::new(document_value(&random_document(seed, &family)?)?))
}

/// Policy file, or zero weights (the uniform policy); `b` is tightened to
/// the embedding points unless the file fixes it.
fn load_policy(emdp: &EmbeddedMdp, path: Option<&Path>) -> Result<SoftmaxPolicy> {
    let raw = match path {
        None => SoftmaxPolicy {
            weights: vec![vec![0.0; emdp.dim()]; emdp.base.n_actions()],
            temperature: 1.0,
            bound_b: None,
        },
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
    };
    if raw.weights.len() != emdp.base.n_actions() || raw.weights.iter().any(|w| w.len() != emdp.dim()) {
        bail!(
            "policy weights must be {} x {} to match the MDP",
            emdp.base.n_actions(),
            emdp.dim()
        );
    }
    let fixed = raw.bound_b;
    let policy = make_toy_policy(raw.weights, raw.temperature)?;
    Ok(match fixed {
        Some(b) => SoftmaxPolicy {
            bound_b: Some(b),
            ..policy
        },
        None => policy.tightened_for(&emdp.embedding),
    })
}

fn onpolicy(path: &Path, policy: Option<&Path>, start: &str) -> Result<Report> {
    let emdp = read_embedded(path)?;
    let policy = load_policy(&emdp, policy)?;
    let dist = start_distribution(&emdp.base, start)?;
    let analysis = analyze(&emdp, &policy, &dist)?;
    let mut out = serde_json::to_value(&analysis)?;
    out["bound_B"] = num(analysis.bound_b);
    out["s_trans_ids"] = json!(analysis
        .s_trans
        .iter()
        .map(|&s| emdp.base.state_ids()[s].clone())
        .collect::<Vec<_>>());
    out["policy"] = serde_json::to_value(&policy)?;
    let rows = vec![vec![
        cell(analysis.safety),
        cell(analysis.lambda1),
        cell(analysis.bound_b),
        analysis.s_trans.len().to_string(),
    ]];
    Ok(Report::new(out).with_table(vec!["safety", "lambda1", "bound_B", "transient_states"], rows))
}

fn onpolicy_sweep(
    path: &Path,
    policy: Option<&Path>,
    sizes: &[f64],
    seed: u64,
    threshold: f64,
    big_n: Option<f64>,
    start: &str,
) -> Result<Report> {
    if !(threshold > 0.0) {
        bail!("threshold must be positive");
    }
    let emdp = read_embedded(path)?;
    let policy = load_policy(&emdp, policy)?;
    let dist = start_distribution(&emdp.base, start)?;
    let mut rows = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        let pert = random_perturbation(&emdp, &policy, size, seed.wrapping_add(k as u64), threshold)?;
        rows.push(("random", size, rate_of_decrease_check(&emdp, &policy, &pert, &dist)?));
    }
    if let Some(n) = big_n {
        let pert = uniform_shutdown_perturbation(&emdp, &policy, n)?;
        rows.push(("uniform_shutdown", pert.size, rate_of_decrease_check(&emdp, &policy, &pert, &dist)?));
    }
    rows.sort_by(|a, b| a.2.size.total_cmp(&b.2.size).then(a.0.cmp(b.0)));
    let failed = rows
        .iter()
        .any(|(kind, requested, r)| *kind == "random" && *requested <= threshold && !r.below_bound);
    let json_rows: Vec<Value> = rows
        .iter()
        .map(|(kind, requested, r)| {
            json!({
                "kind": kind,
                "requested_size": num(*requested),
                "size": num(r.size),
                "safety_before": num(r.safety_before),
                "safety_after": num(r.safety_after),
                "delta_safety": num(r.delta_safety),
                "ratio": num(r.ratio),
                "bound_B": num(r.bound_b),
                "lambda1": num(r.lambda1),
                "below_bound": r.below_bound,
                "lower_witness": r.lower_witness,
                "trans_included": r.trans_included,
            })
        })
        .collect();
    let table = rows
        .iter()
        .map(|(kind, _, r)| {
            vec![
                kind.to_string(),
                cell(r.size),
                cell(r.delta_safety),
                cell(r.ratio),
                cell(r.bound_b),
                r.below_bound.to_string(),
                r.lower_witness.to_string(),
                r.trans_included.to_string(),
            ]
        })
        .collect();
    let status = if failed { Status::Negative } else { Status::Ok };
    Ok(Report::new(json!({
        "seed": seed,
        "threshold": threshold,
        "start": start,
        "policy": policy,
        "rows": json_rows,
    }))
    .with_table(
        vec!["kind", "size", "delta_safety", "ratio", "bound_B", "below_bound", "lower_witness", "trans_included"],
        table,
    )
    .with_status(status))
}

/// Copy of `mdp` with every non-safe reward moved by a uniform draw from `[-size, size]`.
fn jitter_rewards(mdp: &MdpSpec, size: f64, seed: u64) -> Result<MdpSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rewards = mdp
        .rewards()
        .iter()
        .enumerate()
        .map(|(s, row)| {
            row.iter()
                .map(|&r| {
                    let shift = size * (2.0 * rng.random::<f64>() - 1.0);
                    if mdp.is_safe(s) { r } else { r + shift }
                })
                .collect()
        })
        .collect();
    Ok(MdpSpec::new(
        mdp.state_ids().to_vec(),
        mdp.action_ids().to_vec(),
        mdp.transition().to_vec(),
        rewards,
        mdp.discount(),
        mdp.safe().to_vec(),
    )?)
}

fn stability_experiment(
    path: &Path,
    epsilon: f64,
    big_n: Option<f64>,
    sizes: &[f64],
    seed: u64,
    perturbed: Option<&Path>,
    args: &MetricArgs,
) -> Result<Report> {
    let m = read_mdp(path)?;
    let config = metric_config(args, m.discount())?;
    let horizon = match big_n {
        Some(n) => n,
        None => certify_safety(&m, &SafetyQuery::worst_case(epsilon))?.worst_time,
    };
    let mut ladder: Vec<f64> = sizes.iter().copied().filter(|&s| s > 0.0).collect();
    ladder.sort_by(f64::total_cmp);
    ladder.dedup();
    ladder.insert(0, 0.0);
    let mut rungs = Vec::new();
    for (k, &size) in ladder.iter().enumerate() {
        let m_prime = if size == 0.0 {
            m.clone()
        } else {
            jitter_rewards(&m, size, seed.wrapping_add(k as u64))?
        };
        rungs.push(("reward_jitter", size, verify_stability_instance(&m, &m_prime, horizon, epsilon, &config)?));
    }
    if let Some(p) = perturbed {
        let m_prime = read_mdp(p)?;
        let report = verify_stability_instance(&m, &m_prime, horizon, epsilon, &config)?;
        rungs.push(("file", report.hausdorff, report));
    }
    let ladder_rungs: Vec<_> = rungs.iter().filter(|r| r.0 == "reward_jitter").collect();
    let first_failure = ladder_rungs.iter().position(|r| !r.2.conclusion_held);
    let largest_holding = match first_failure {
        Some(0) => None,
        Some(k) => Some(ladder_rungs[k - 1].1),
        None => ladder_rungs.last().map(|r| r.1),
    };
    let monotone = first_failure.is_none_or(|k| ladder_rungs[k..].iter().all(|r| !r.2.conclusion_held));
    let violated = rungs.iter().any(|r| r.2.hypotheses_held && !r.2.conclusion_held);
    let json_rungs: Vec<Value> = rungs
        .iter()
        .map(|(kind, size, r)| {
            json!({
                "kind": kind,
                "size": num(*size),
                "hausdorff": num(r.hausdorff),
                "isolation_threshold": num(r.isolation_threshold),
                "isolated": r.isolation.isolated,
                "isolation_distance": num(r.isolation.min_distance),
                "base_worst_time": num(r.base.worst_time),
                "perturbed_worst_time": num(r.perturbed.worst_time),
                "hypotheses_held": r.hypotheses_held,
                "conclusion_held": r.conclusion_held,
            })
        })
        .collect();
    let table = rungs
        .iter()
        .map(|(kind, size, r)| {
            vec![
                kind.to_string(),
                cell(*size),
                cell(r.hausdorff),
                r.isolation.isolated.to_string(),
                cell(r.isolation.min_distance),
                cell(r.perturbed.worst_time),
                r.hypotheses_held.to_string(),
                r.conclusion_held.to_string(),
            ]
        })
        .collect();
    let status = if violated { Status::Negative } else { Status::Ok };
    Ok(Report::new(json!({
        "epsilon": epsilon,
        "horizon": num(horizon),
        "seed": seed,
        "config": config,
        "rungs": json_rungs,
        "largest_holding_size": largest_holding.map(num),
        "failure_boundary_monotone": monotone,
        "counterexample_found": violated,
    }))
    .with_table(
        vec![
            "kind",
            "size",
            "hausdorff",
            "isolated",
            "isolation_distance",
            "perturbed_worst_time",
            "hypotheses_held",
            "conclusion_held",
        ],
        table,
    )
    .with_status(status))
}
