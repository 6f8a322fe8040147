use std::io::Write;
use std::path::{Path, PathBuf};

use multigail::config::{demo_path, ExperimentConfig};
use multigail::envs::{EnvConfig, EnvId, Layout};
use multigail::eval::report::{correlation_csv, density_csv, divergence_csv, usage_csv};
use multigail::eval::{
    action_distribution, action_points, alpha_grid, blend_alphas, divergence_table, fusion_compare, kde,
    persona_correlation, run_episodes, ActionHistogram, Conditioned,
};
use multigail::experts::{record_demos, DemonstrationSet, Persona};
use multigail::parallel::Execution;
use multigail::policy::{ModelMeta, TrainedModel};
use multigail::trainer::{RunOutputs, Trainer};
use multigail_server::session::alpha_error;
use multigail_server::{ServeOptions, ServedModel, Server};
use serde_json::json;

use crate::manifest::{self, check_prior, run_id, Artifact, Prior, RunManifest};
use crate::{EvalArgs, ExportPlotsArgs, Failure, GenDemosArgs, ServeArgs, Suite, TrainArgs};

const DEFAULT_SAMPLES: usize = 5000;
const KDE_GRID: usize = 41;

type Outcome = Result<(), Failure>;

fn read_layout(path: &Path) -> Result<Layout, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(Layout::parse(&text)?)
}

fn input(path: &Path) -> Result<Artifact, Failure> {
    Artifact::of(path, path.to_path_buf())
}

/// Lists `files` (relative to `dir`) as artifacts.
fn outputs(dir: &Path, files: &[PathBuf]) -> Result<Vec<Artifact>, Failure> {
    files.iter().map(|f| Artifact::of(&dir.join(f), f.clone())).collect()
}

struct Run {
    dir: PathBuf,
    manifest_name: String,
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<Artifact>,
    id: String,
    started: u64,
}

impl Run {
    /// `None` when the same run already completed in `dir`.
    fn begin(
        dir: &Path,
        manifest_name: &str,
        command: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: Vec<Artifact>,
    ) -> Result<Option<Self>, Failure> {
        let id = run_id(command, &config, &seeds, &inputs);
        if let Prior::UpToDate(m) = check_prior(dir, manifest_name, &id)? {
            println!("{}: run {} is up to date", dir.display(), m.run_id);
            return Ok(None);
        }
        std::fs::create_dir_all(dir)?;
        Ok(Some(Self {
            dir: dir.to_path_buf(),
            manifest_name: manifest_name.to_string(),
            command: command.to_string(),
            config,
            seeds,
            inputs,
            id,
            started: manifest::unix_now(),
        }))
    }

    fn write_file(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        std::fs::write(self.dir.join(name), contents)?;
        Ok(PathBuf::from(name))
    }

    fn finish(self, files: &[PathBuf]) -> Outcome {
        let m = RunManifest {
            manifest_version: manifest::MANIFEST_VERSION,
            run_id: self.id,
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            artifacts: outputs(&self.dir, files)?,
            started_unix: self.started,
            finished_unix: manifest::unix_now(),
        };
        manifest::write(&self.dir, &self.manifest_name, &m)?;
        println!(
            "wrote {} ({} artifacts)",
            self.dir.join(&self.manifest_name).display(),
            m.artifacts.len()
        );
        Ok(())
    }
}

pub fn gen_demos(args: GenDemosArgs) -> Outcome {
    let cfg = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let env_id: EnvId = match (args.env, &cfg) {
        (Some(e), Some(c)) if EnvId::from(e) != c.env => {
            return Err(Failure::usage(format!(
                "--env {} disagrees with the config's env {}",
                EnvId::from(e),
                c.env
            )))
        }
        (Some(e), _) => e.into(),
        (None, Some(c)) => c.env,
        (None, None) => return Err(Failure::usage("gen-demos needs --env or --config")),
    };
    let names: Vec<String> = if !args.personas.is_empty() {
        args.personas.clone()
    } else if let Some(c) = &cfg {
        c.personas.clone()
    } else {
        Persona::for_env(env_id).iter().map(|p| p.to_string()).collect()
    };
    let personas: Vec<Persona> = names
        .iter()
        .map(|n| Persona::parse_for(n.trim(), env_id))
        .collect::<Result<_, _>>()?;
    let samples = args
        .samples
        .or(cfg.as_ref().map(|c| c.demos.samples))
        .unwrap_or(DEFAULT_SAMPLES);
    if samples == 0 {
        return Err(Failure::usage("--samples must be positive"));
    }
    let seed = args.seed.or(cfg.as_ref().map(|c| c.demos.seed)).unwrap_or(0);
    let layout_path = args.layout.clone().or(cfg.as_ref().and_then(|c| c.layout.clone()));
    let out = args
        .out
        .clone()
        .or(cfg.as_ref().map(|c| c.demos.dir.clone()))
        .ok_or_else(|| Failure::usage("gen-demos needs --out or --config"))?;
    let (env, inputs) = match &layout_path {
        Some(p) => (EnvConfig::new(read_layout(p)?), vec![input(p)?]),
        None => (EnvConfig::reference(env_id), Vec::new()),
    };
    if env.id() != env_id {
        return Err(Failure::usage(format!(
            "layout `{}` is not a {env_id} layout",
            env.layout.name
        )));
    }
    let config = json!({
        "env": env_id,
        "layout": env.layout.name,
        "personas": personas,
        "samples": samples,
    });
    let Some(run) = Run::begin(&out, "manifest.json", "gen-demos", config, vec![seed], inputs)? else {
        return Ok(());
    };
    let mut files = Vec::new();
    for p in &personas {
        let d = record_demos(*p, &env, samples, seed)?;
        let path = demo_path(&out, p.as_str());
        d.save(&path)?;
        println!("{p}: {} samples in {} episodes", d.sample_count(), d.episodes.len());
        files.push(PathBuf::from(path.file_name().unwrap()));
    }
    run.finish(&files)
}

pub fn train(args: TrainArgs) -> Outcome {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(p) = &args.persona {
        cfg = cfg.single_persona(p)?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let env = cfg.env_config()?;
    let demos = cfg.load_demos()?;
    let mut inputs: Vec<Artifact> = cfg
        .persona_list()?
        .iter()
        .map(|p| input(&cfg.demo_path(p.as_str())))
        .collect::<Result<_, _>>()?;
    if let Some(l) = &cfg.layout {
        inputs.push(input(l)?);
    }
    // paths are machine-specific; the inputs are identified by content
    let mut snapshot = cfg.clone();
    snapshot.demos.dir = PathBuf::from("demos");
    snapshot.layout = cfg
        .layout
        .as_ref()
        .map(|l| PathBuf::from(l.file_name().unwrap_or_default()));
    let config = serde_json::to_value(&snapshot).map_err(|e| Failure::runtime(e.to_string()))?;
    let Some(run) = Run::begin(
        &args.out,
        "manifest.json",
        "train",
        config,
        vec![cfg.train.seed],
        inputs,
    )?
    else {
        return Ok(());
    };
    let snapshot_file = run.write_file("config.toml", &snapshot.to_toml()?)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.ppo.clone(), cfg.network.clone(), env, &demos)?;
    let outputs = RunOutputs { dir: args.out.clone() };
    let total = cfg.train.iterations;
    let summary = trainer.run(Some(&outputs), |m| {
        let i = m.iteration + 1;
        if i == 1 || i % 10 == 0 || i == total {
            eprintln!(
                "iteration {i}/{total}: len {:.1} goal {:.2} r_g {:.3} r_s {:.3} disc_loss {:.4}",
                m.mean_episode_length, m.goal_rate, m.mean_r_g, m.mean_r_s, m.disc_loss
            );
        }
    })?;
    if summary.plateau {
        println!("discriminator loss reached a plateau");
    }
    let mut files = vec![snapshot_file, PathBuf::from("metrics.jsonl")];
    for c in &summary.checkpoints {
        files.push(PathBuf::from(c.file_name().unwrap()));
    }
    let metrics = multigail::trainer::file_checksum(&outputs.metrics())?;
    println!("trained {} iterations; metrics sha256 {metrics}", summary.iterations);
    run.finish(&files)
}

/// The environment a checkpoint was trained in.
fn env_for(meta: &ModelMeta, layout: Option<&Path>, expect: Option<EnvId>) -> Result<EnvConfig, Failure> {
    if let Some(e) = expect {
        if e != meta.env {
            return Err(Failure::usage(format!(
                "checkpoint was trained on {}, not {e}",
                meta.env
            )));
        }
    }
    let env = match layout {
        Some(p) => EnvConfig::new(read_layout(p)?),
        None => EnvConfig::reference(meta.env),
    };
    if env.layout.name != meta.layout || env.id() != meta.env {
        return Err(Failure::usage(format!(
            "checkpoint was trained on layout `{}`; pass it with --layout",
            meta.layout
        )));
    }
    Ok(env)
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    a[i] = 1.0;
    a
}

fn alpha_label(a: &[f64]) -> String {
    let v: Vec<String> = a.iter().map(|x| x.to_string()).collect();
    format!("alpha={}", v.join(" "))
}

fn check_alpha(alpha: &[f64], n: usize) -> Result<(), Failure> {
    if !alpha.is_empty() && alpha.len() != n {
        return Err(Failure::usage(format!(
            "--alpha has {} values but the checkpoint has {n} personas",
            alpha.len()
        )));
    }
    Ok(())
}

/// Expert references per persona, from `dir` or recorded afresh.
fn references(
    personas: &[String],
    env: &EnvConfig,
    dir: Option<&Path>,
    inputs: &mut Vec<Artifact>,
) -> Result<Vec<DemonstrationSet>, Failure> {
    personas
        .iter()
        .map(|p| match dir {
            Some(d) => {
                let path = demo_path(d, p);
                if !path.exists() {
                    return Err(Failure::usage(format!("missing demonstrations {}", path.display())));
                }
                inputs.push(input(&path)?);
                let set = DemonstrationSet::load(&path)?;
                if set.persona != *p || set.env != env.id() {
                    return Err(Failure::usage(format!(
                        "{} does not hold `{p}` for {}",
                        path.display(),
                        env.id()
                    )));
                }
                Ok(set)
            }
            None => Ok(record_demos(Persona::parse_for(p, env.id())?, env, DEFAULT_SAMPLES, 0)?),
        })
        .collect()
}

fn histogram_rows(out: &mut String, source: &str, h: &ActionHistogram) {
    use std::fmt::Write;
    for (d, hist) in h.dims.iter().enumerate() {
        for (b, p) in hist.probs.iter().enumerate() {
            let center = if hist.edges.is_empty() {
                b as f64
            } else {
                0.5 * (hist.edges[b] + hist.edges[b + 1])
            };
            let _ = writeln!(out, "{source},{d},{b},{center},{p}");
        }
    }
}

pub fn eval(args: EvalArgs) -> Outcome {
    let model = TrainedModel::load(&args.checkpoint)?;
    let env = env_for(&model.meta, args.layout.as_deref(), args.env.map(Into::into))?;
    let personas = model.meta.personas.clone();
    let n = personas.len();
    check_alpha(&args.alpha, n)?;
    let mut inputs = vec![input(&args.checkpoint)?];
    let exec = Execution::Parallel;
    let policy = &model.policy;
    let suite = args.suite;
    let episodes = args.episodes.unwrap_or(match suite {
        Suite::Correlation => 4,
        Suite::FusionCompare => 30,
        _ => 10,
    });
    if episodes == 0 {
        return Err(Failure::usage("--episodes must be positive"));
    }
    let discrete = env.action_spec().is_discrete();
    match suite {
        Suite::Correlation | Suite::FusionCompare if !discrete => {
            return Err(Failure::usage(format!(
                "the {} suite needs the navigation env",
                suite.name()
            )))
        }
        Suite::Kde if discrete => return Err(Failure::usage("the kde suite needs the driving env")),
        _ => {}
    }
    let members: Vec<TrainedModel> = if suite == Suite::FusionCompare {
        if args.members.len() != n {
            return Err(Failure::usage(format!(
                "fusion-compare needs {n} --members (one per persona: {}), got {}",
                personas.join(", "),
                args.members.len()
            )));
        }
        let mut out = Vec::new();
        for (path, p) in args.members.iter().zip(&personas) {
            let m = TrainedModel::load(path)?;
            if m.meta.personas != [p.clone()] || m.meta.env != model.meta.env || m.meta.layout != model.meta.layout {
                return Err(Failure::usage(format!(
                    "member {} must be a single-persona `{p}` model on {}",
                    path.display(),
                    model.meta.layout
                )));
            }
            inputs.push(input(path)?);
            out.push(m);
        }
        out
    } else {
        Vec::new()
    };
    let refs = match suite {
        Suite::Divergence | Suite::Kde => references(&personas, &env, args.demos.as_deref(), &mut inputs)?,
        _ => Vec::new(),
    };
    let mut agents: Vec<(String, Vec<f64>)> = personas
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), one_hot(n, i)))
        .collect();
    if !args.alpha.is_empty() {
        agents.push((alpha_label(&args.alpha), args.alpha.clone()));
    }
    let config = json!({
        "suite": suite.name(),
        "episodes": episodes,
        "alpha": args.alpha,
        "references": if args.demos.is_some() { "files" } else { "recorded" },
    });
    let name = format!("manifest-eval-{}.json", suite.name());
    let Some(run) = Run::begin(
        &args.out,
        &name,
        &format!("eval {}", suite.name()),
        config,
        vec![args.seed],
        inputs,
    )?
    else {
        return Ok(());
    };
    let mut files = Vec::new();
    match suite {
        Suite::Divergence => {
            let spec = env.action_spec();
            let ref_hists: Vec<(String, ActionHistogram)> = refs
                .iter()
                .map(|d| Ok((d.persona.clone(), ActionHistogram::from_actions(spec, d.actions())?)))
                .collect::<Result<_, multigail::Error>>()?;
            let mut rows = Vec::new();
            let mut hist_csv = String::from("source,dim,bin,center,probability\n");
            for (name, h) in &ref_hists {
                histogram_rows(&mut hist_csv, &format!("expert:{name}"), h);
            }
            for (label, alpha) in &agents {
                let actor = Conditioned {
                    policy,
                    alpha: alpha.clone(),
                };
                let h = action_distribution(&actor, &env, episodes, args.seed, exec)?;
                histogram_rows(&mut hist_csv, &format!("agent:{label}"), &h);
                let table = divergence_table(&h, &ref_hists)?;
                let closest = table
                    .iter()
                    .min_by(|a, b| a.1.js.total_cmp(&b.1.js))
                    .map(|r| r.0.clone())
                    .unwrap_or_default();
                let js: Vec<String> = table.iter().map(|(r, d)| format!("{r} {:.4}", d.js)).collect();
                println!("{label}: JS {} (closest: {closest})", js.join(", "));
                rows.extend(table.into_iter().map(|(r, d)| (label.clone(), r, d)));
            }
            files.push(run.write_file("divergence.csv", &divergence_csv(&rows))?);
            files.push(run.write_file("histograms.csv", &hist_csv)?);
        }
        Suite::Correlation => {
            let grid = alpha_grid(n, &[0.0, 0.5, 1.0]);
            let m = persona_correlation(policy, &env, &grid, episodes, args.seed, exec)?;
            for (g, row) in m.groups.iter().zip(&m.coefficients) {
                let v: Vec<String> = row.iter().map(|c| format!("{c:+.3}")).collect();
                println!("{g}: {}", v.join(" "));
            }
            if m.degenerate.iter().flatten().any(|d| *d) {
                eprintln!("warning: some signature groups never varied; their coefficients are undefined");
            }
            files.push(run.write_file("correlation.csv", &correlation_csv(&m, &personas))?);
        }
        Suite::FusionCompare => {
            let alphas = if args.alpha.is_empty() {
                blend_alphas(n)
            } else {
                vec![args.alpha.clone()]
            };
            let member_policies: Vec<_> = members.iter().map(|m| m.policy.clone()).collect();
            let rows = fusion_compare(policy, &member_policies, &env, &alphas, episodes, args.seed, exec)?;
            for (method, alpha, u) in &rows {
                let s: Vec<String> = u
                    .groups
                    .iter()
                    .zip(&u.summary)
                    .map(|(g, m)| format!("{g} {:.3}±{:.3}", m.mean, m.std))
                    .collect();
                println!("{method} {}: {}", alpha_label(alpha), s.join(", "));
            }
            files.push(run.write_file("usage.csv", &usage_csv(&rows))?);
        }
        Suite::Kde => {
            let spec = env.action_spec();
            for d in &refs {
                let pts = action_points(&d.actions().cloned().collect::<Vec<_>>(), &spec)?;
                let g = kde(&pts, KDE_GRID)?;
                files.push(run.write_file(&format!("density-expert-{}.csv", d.persona), &density_csv(&g))?);
            }
            for (label, alpha) in &agents {
                let actor = Conditioned {
                    policy,
                    alpha: alpha.clone(),
                };
                let eps = run_episodes(&actor, &env, episodes, args.seed, exec)?;
                let pts = action_points(&eps.concat(), &spec)?;
                let g = kde(&pts, KDE_GRID)?;
                println!("{label}: {} local maxima", g.local_maxima().len());
                let file = label.replace(['=', ' '], "-");
                files.push(run.write_file(&format!("density-agent-{file}.csv"), &density_csv(&g))?);
            }
        }
    }
    run.finish(&files)
}

pub fn export_plots(args: ExportPlotsArgs) -> Outcome {
    let out = args.out.clone().unwrap_or_else(|| args.report.join("plots"));
    let mut tables: Vec<PathBuf> = std::fs::read_dir(&args.report)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.report.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    tables.sort();
    let inputs: Vec<Artifact> = tables
        .iter()
        .map(|p| Artifact::of(p, PathBuf::from(p.file_name().unwrap())))
        .collect::<Result<_, _>>()?;
    if inputs.is_empty() {
        return Err(Failure::usage(format!(
            "{} has no report tables",
            args.report.display()
        )));
    }
    let Some(run) = Run::begin(
        &out,
        "manifest-plots.json",
        "export-plots",
        json!({}),
        Vec::new(),
        inputs,
    )?
    else {
        return Ok(());
    };
    let mut files = Vec::new();
    for t in &tables {
        let text = std::fs::read_to_string(t)?;
        let stem = t.file_stem().unwrap().to_string_lossy().to_string();
        for (name, img) in crate::plots::render(&stem, &text)? {
            img.save(out.join(&name)).map_err(|e| Failure::runtime(e.to_string()))?;
            files.push(PathBuf::from(name));
        }
    }
    if files.is_empty() {
        return Err(Failure::usage(format!(
            "no plottable tables in {}",
            args.report.display()
        )));
    }
    run.finish(&files)
}

pub fn serve(args: ServeArgs) -> Outcome {
    let model = TrainedModel::load(&args.checkpoint)?;
    let layout = match &args.layout {
        Some(p) => Some(read_layout(p)?),
        None => None,
    };
    env_for(&model.meta, args.layout.as_deref(), args.env.map(Into::into))?;
    let n = model.meta.n_personas();
    let default_alpha = if args.alpha.is_empty() {
        None
    } else {
        if let Some(e) = alpha_error(&args.alpha, n) {
            return Err(Failure::usage(format!("--alpha: {}", e.to_line().trim_end())));
        }
        Some(args.alpha.clone())
    };
    if !(args.tick_rate > 0.0) {
        return Err(Failure::usage("--tick-rate must be positive"));
    }
    let mut served = ServedModel::new(model, layout)?;
    served.deterministic = args.deterministic;
    let options = ServeOptions {
        tick_rate: args.tick_rate,
        session_timeout: std::time::Duration::from_secs(args.session_timeout),
        default_seed: args.seed,
        default_alpha,
    };
    let server = Server::bind(&args.bind, served, options)?;
    println!("listening on ws://{}", server.local_addr()?);
    std::io::stdout().flush()?;
    server.run()?;
    Ok(())
}
