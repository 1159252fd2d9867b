use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use poladca_core::diagnose::{StreamConfig, StreamState};
use poladca_core::graphio::{
    generate_synthetic_dataset, load_csv_dataset, records_to_samples, stratified_split, write_csv_dataset, GraphSample,
    PreprocessConfig, Split, SynthConfig,
};
use poladca_core::robustlab::{
    amplification_factors, flop_row, hierarchy_experiment, lemma_suite, uniform_rho, HierarchyConfig, RobustnessReport,
};
use poladca_core::trainer::{fit, Model, ModelConfig};

use crate::config::{resolve, write_resolved, FlatConfig};
use crate::InvariantViolation;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Common `--config`/`--set` handling: resolves, creates `out` and
/// persists the resolved map there.
fn setup<T>(
    defaults: &T,
    config: Option<&Path>,
    sets: &[(String, String)],
    out: Option<&Path>,
) -> Result<(T, FlatConfig)>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let (cfg, flat) = resolve(defaults, config, sets)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_resolved(dir, &flat)?;
    }
    Ok((cfg, flat))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct GendataConfig {
    pub seed: u64,
    pub synth: SynthConfig,
}

pub fn gendata(config: Option<&Path>, sets: &[(String, String)], out: &Path) -> Result<()> {
    let (cfg, _) = setup(&GendataConfig::default(), config, sets, Some(out))?;
    let records = generate_synthetic_dataset(&cfg.synth, cfg.seed)?;
    let manifest = write_csv_dataset(out, &records)?;
    println!(
        "wrote {} records ({} classes x {}) to {}",
        records.len(),
        cfg.synth.n_classes,
        cfg.synth.samples_per_class,
        manifest.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct TrainConfig {
    pub manifest: String,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
}

fn load_samples(manifest: &str, pre: &PreprocessConfig) -> Result<Vec<GraphSample>> {
    if manifest.is_empty() {
        bail!("no manifest given (set `manifest` or pass --manifest)");
    }
    let records = load_csv_dataset(Path::new(manifest))?;
    Ok(records_to_samples(&records, pre)?)
}

pub fn train(config: Option<&Path>, sets: &[(String, String)], out: &Path) -> Result<()> {
    let (cfg, _) = setup(&TrainConfig::default(), config, sets, Some(out))?;
    cfg.model.validate()?;
    cfg.preprocess.validate()?;
    let samples = load_samples(&cfg.manifest, &cfg.preprocess)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, cfg.split_seed)?;
    let (model, report) = fit(&samples, &split, &cfg.model, &cfg.preprocess, None)?;

    write_file(&out.join("checkpoint.json"), &(model.to_json()? + "\n"))?;
    write_file(&out.join("report.json"), &(report.to_json()? + "\n"))?;
    write_file(&out.join("confusion.csv"), &report.confusion_csv())?;
    write_file(&out.join("split.json"), &(serde_json::to_string_pretty(&split)? + "\n"))?;
    println!(
        "{}: {} samples ({} train / {} val / {} test), {} epochs, best {}; test accuracy {:.4}, macro-F1 {:.4}",
        cfg.model.scheme,
        samples.len(),
        report.n_train,
        report.n_val,
        report.n_test,
        report.stopped_epoch,
        report.best_epoch,
        report.test.accuracy,
        report.test.macro_f1
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub checkpoint: String,
    /// CSV file of time steps, `-` for standard input.
    pub input: String,
    /// JSON-lines destination, `-` for standard output.
    pub output: String,
    /// 0 means "as in the checkpoint".
    pub window_len: usize,
    pub stride: usize,
    pub k: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { checkpoint: String::new(), input: "-".into(), output: "-".into(), window_len: 0, stride: 0, k: 0 }
    }
}

fn load_model(path: &str) -> Result<Model> {
    if path.is_empty() {
        bail!("no checkpoint given (set `checkpoint` or pass --checkpoint)");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {path}"))?;
    Model::from_json(&text).with_context(|| format!("loading checkpoint {path}"))
}

/// Parses one CSV row; `None` for a header-like first row.
fn parse_row(line: &str, lineno: usize, source: &str) -> Result<Option<Vec<f64>>> {
    let vals: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
    match vals {
        Ok(v) if v.iter().all(|x| x.is_finite()) => Ok(Some(v)),
        Ok(_) => bail!("{source}: line {lineno}: non-finite value"),
        Err(_) if lineno == 1 => Ok(None),
        Err(_) => bail!("{source}: line {lineno}: cannot parse `{line}` as numbers"),
    }
}

pub fn diagnose(config: Option<&Path>, sets: &[(String, String)]) -> Result<()> {
    let (cfg, flat) = resolve(&DiagnoseConfig::default(), config, sets)?;
    let model = load_model(&cfg.checkpoint)?;
    let trained = StreamConfig::from_model(&model);
    let or = |v: usize, d: usize| if v == 0 { d } else { v };
    let stream_cfg = StreamConfig {
        window_len: or(cfg.window_len, trained.window_len),
        stride: or(cfg.stride, trained.stride),
        k: or(cfg.k, trained.k),
    };
    let mut state = StreamState::new(&model, stream_cfg)?;

    let reader: Box<dyn BufRead> = if cfg.input == "-" {
        Box::new(BufReader::new(io::stdin().lock()))
    } else {
        Box::new(BufReader::new(File::open(&cfg.input).with_context(|| format!("opening {}", cfg.input))?))
    };
    let mut writer: Box<dyn Write> = if cfg.output == "-" {
        Box::new(BufWriter::new(io::stdout().lock()))
    } else {
        let path = PathBuf::from(&cfg.output);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
            write_resolved(dir, &flat)?;
        }
        Box::new(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    };

    for (i, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", cfg.input))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(step) = parse_row(&line, i + 1, &cfg.input)? else { continue };
        if let Some(d) = state.push(&step)? {
            serde_json::to_writer(&mut writer, &d)?;
            writer.write_all(b"\n")?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSettings {
    /// Total noise trials.
    pub trials: usize,
    pub trials_per_graph: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSettings {
    pub alpha: Vec<f64>,
    /// Common off-diagonal correlation.
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopSettings {
    pub n: u64,
    pub d: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySettings {
    pub seeds: Vec<u64>,
    /// CSV manifest; empty means a generated synthetic dataset.
    pub manifest: String,
    pub data_seed: u64,
    pub sigma_bar: f64,
    pub anti_correlation: f64,
    pub trials: usize,
    pub probe_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustConfig {
    pub lemmas: LemmaSettings,
    pub gamma: GammaSettings,
    pub flops: FlopSettings,
    pub hierarchy: HierarchySettings,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub synth: SynthConfig,
}

impl Default for RobustConfig {
    fn default() -> Self {
        let h = HierarchyConfig::default();
        Self {
            lemmas: LemmaSettings { trials: 1000, trials_per_graph: 4, seed: 0 },
            gamma: GammaSettings { alpha: vec![0.5, 0.5], rho: 1.0 },
            flops: FlopSettings { n: 10, d: 64 },
            hierarchy: HierarchySettings {
                seeds: (0..5).collect(),
                manifest: String::new(),
                data_seed: 0,
                sigma_bar: h.sigma_bar,
                anti_correlation: h.anti_correlation,
                trials: h.trials,
                probe_samples: h.probe_samples,
            },
            model: ModelConfig { d_model: 32, ..ModelConfig::default() },
            preprocess: PreprocessConfig { stride: 1000, ..PreprocessConfig::default() },
            synth: SynthConfig { samples_per_class: 80, ..SynthConfig::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Lemmas,
    Hierarchy,
    Gamma,
    Flops,
}

pub fn robust(suite: Suite, config: Option<&Path>, sets: &[(String, String)], out: &Path) -> Result<()> {
    let (cfg, _) = setup(&RobustConfig::default(), config, sets, Some(out))?;
    let mut report = RobustnessReport::default();
    let mut violation = None;
    match suite {
        Suite::Flops => {
            let row = flop_row(cfg.flops.n, cfg.flops.d);
            println!("n = {}, D = {}", row.n, row.d);
            println!("SCA {}", row.sca);
            println!("DCA {}", row.dca);
            println!("PolaDCA {}", row.poladca);
            report.flops = Some(vec![row]);
        }
        Suite::Gamma => {
            let n = cfg.gamma.alpha.len();
            let a = amplification_factors(&cfg.gamma.alpha, &uniform_rho(n, cfg.gamma.rho)?)?;
            println!("gamma {:.5}{}", a.gamma, if a.gamma_clamped { " (clamped)" } else { "" });
            println!("gamma_pol {:.5}{}", a.gamma_pol, if a.gamma_pol_clamped { " (clamped)" } else { "" });
            report.amplification = Some(a);
        }
        Suite::Lemmas => {
            let per = cfg.lemmas.trials_per_graph.max(1);
            let graphs = cfg.lemmas.trials.div_ceil(per).max(1);
            let rep = lemma_suite(graphs, per, cfg.lemmas.seed)?;
            println!("trials: {}", rep.trials);
            println!("consensus bound: {} violations / {} checks", rep.consensus.violations, rep.consensus.checks);
            println!("diversity bound: {} violations / {} checks", rep.diversity.violations, rep.diversity.checks);
            println!("attention bound: {} violations / {} checks", rep.attention.violations, rep.attention.checks);
            println!(
                "diversity bound with sqrt(2) coefficient: {} violations / {} checks (not implied by the deviation formula)",
                rep.diversity_sqrt2.violations, rep.diversity_sqrt2.checks
            );
            println!("violations: {}", rep.proven_violations());
            if rep.proven_violations() > 0 {
                violation = Some(format!("{} bound violations", rep.proven_violations()));
            }
            report.lemmas = Some(rep);
        }
        Suite::Hierarchy => {
            let h = &cfg.hierarchy;
            let samples = if h.manifest.is_empty() {
                let records = generate_synthetic_dataset(&cfg.synth, h.data_seed)?;
                records_to_samples(&records, &cfg.preprocess)?
            } else {
                load_samples(&h.manifest, &cfg.preprocess)?
            };
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let split: Split = stratified_split(&labels, h.data_seed)?;
            let hc = HierarchyConfig {
                model: cfg.model.clone(),
                sigma_bar: h.sigma_bar,
                anti_correlation: h.anti_correlation,
                trials: h.trials,
                probe_samples: h.probe_samples,
            };
            let rep = hierarchy_experiment(&samples, &split, &cfg.preprocess, &hc, &h.seeds)?;
            let mut csv = String::from("seed,scheme,noise,ratio\n");
            for s in &rep.seeds {
                println!("seed {}:", s.seed);
                for l in &s.schemes {
                    let anti = l.anti_correlated.as_ref().map_or(String::from("-"), |a| format!("{:.6}", a.mean));
                    println!(
                        "  {:8} L_iid mean {:.6} max {:.6}  L_anti mean {anti}  test acc {:.4}",
                        l.scheme.to_string(),
                        l.iid.mean,
                        l.iid.max,
                        l.test_accuracy
                    );
                    for r in &l.iid.ratios {
                        csv.push_str(&format!("{},{},iid,{r}\n", s.seed, l.scheme));
                    }
                    for r in l.anti_correlated.iter().flat_map(|a| &a.ratios) {
                        csv.push_str(&format!("{},{},anti,{r}\n", s.seed, l.scheme));
                    }
                }
                for f in &s.failures {
                    println!("  failed: {f}");
                }
            }
            let m = &rep.summary;
            println!(
                "median L: PolaDCA {:.6}  DCA {:.6}  GCN {:.6}  ordering {}",
                m.median_poladca,
                m.median_dca,
                m.median_gcn,
                if m.ordering_holds { "holds" } else { "does not hold" }
            );
            println!("anti-correlated: PolaDCA < DCA in {}/{} seeds", m.anti_wins, m.anti_seeds);
            println!("reduction control gap: {:e}", m.max_reduction_gap);
            write_file(&out.join("lipschitz_ratios.csv"), &csv)?;
            if m.max_reduction_gap > 1e-10 {
                violation = Some(format!("reduction control gap {:e} exceeds 1e-10", m.max_reduction_gap));
            }
            report.hierarchy = Some(rep);
        }
    }
    write_file(&out.join("robustness_report.json"), &(report.to_json()? + "\n"))?;
    if let Some(v) = violation {
        return Err(InvariantViolation(v).into());
    }
    Ok(())
}
