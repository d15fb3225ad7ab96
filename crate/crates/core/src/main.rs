// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emocircuit::model::PhaseName;
use emocircuit::harness::{Run, RunConfig};
use emocircuit::Result;

#[derive(Parser)]
#[command(name = "emocircuit", version, about = "Emotional-circuit discovery on a toy multimodal transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// RunConfig JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic contrastive pairs (builds the planted model first).
    GenData(Common),
    PlantModel(Common),
    ExtractSteering(Common),
    ScanLayers(Common),
    LocateHeads(Common),
    TraceNeurons(Common),
    Saliency(Common),
    LogitLens(Common),
    PhasePatch(Common),
    Knockout(Common),
    RunVeena(Common),
    Evaluate(Common),
    FullPipeline(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenData(c)
            | Self::PlantModel(c)
            | Self::ExtractSteering(c)
            | Self::ScanLayers(c)
            | Self::LocateHeads(c)
            | Self::TraceNeurons(c)
            | Self::Saliency(c)
            | Self::LogitLens(c)
            | Self::PhasePatch(c)
            | Self::Knockout(c)
            | Self::RunVeena(c)
            | Self::Evaluate(c)
            | Self::FullPipeline(c) => c,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn fmt_pairs(v: &[(usize, usize)]) -> String {
    v.iter().map(|(a, b)| format!("{a}.{b}")).collect::<Vec<_>>().join(",")
}

fn execute(cmd: &Command) -> Result<String> {
    let run = Run::open(load_config(cmd.common())?)?;
    let dir = run.dir.display().to_string();
    let line = match cmd {
        Command::GenData(_) => format!("{} records, {} emotions -> {dir}/data", run.data.records.len(), run.emotions().len()),
        Command::PlantModel(_) => format!(
            "gates passed={} attempts={} positive={:.3} negative={:.3} -> {dir}/model",
            run.gates.passed, run.gates.attempts, run.gates.positive_emission, run.gates.negative_emission
        ),
        Command::ExtractSteering(_) => {
            let s = run.steering()?;
            let v: Vec<String> = s.iter().map(|s| format!("{}:{}", s.emotion, s.valid_ids.len())).collect();
            format!("valid pairs {} -> {dir}/steering", v.join(" "))
        }
        Command::ScanLayers(_) => {
            let v: Vec<String> = run.scan_layers()?.iter().map(|s| format!("{}:{}", s.emotion, s.peak())).collect();
            format!("scan peaks {} -> {dir}/steering", v.join(" "))
        }
        Command::LocateHeads(_) => {
            let v: Vec<String> = run
                .locate_heads()?
                .iter()
                .map(|h| format!("{}:{}", h.emotion, fmt_pairs(&h.top(1))))
                .collect();
            format!("top heads {} -> {dir}/heads", v.join(" "))
        }
        Command::TraceNeurons(_) => {
            let v: Vec<String> = run
                .trace_neurons()?
                .iter()
                .zip(run.emotions())
                .map(|(t, em)| {
                    let top: Vec<(usize, usize)> =
                        t.first().map(|t| t.neurons.iter().take(1).map(|n| (n.layer, n.neuron)).collect()).unwrap_or_default();
                    format!("{em}:{}", fmt_pairs(&top))
                })
                .collect();
            format!("top neurons {} -> {dir}/neurons", v.join(" "))
        }
        Command::Saliency(_) => {
            let n: usize = run.saliency()?.iter().map(Vec::len).sum();
            format!("{n} saliency maps -> {dir}/heads")
        }
        Command::LogitLens(_) => format!("{} lens reports -> {dir}/steering", run.logit_lens()?.len()),
        Command::PhasePatch(_) => {
            let g = run.phase_patch()?;
            let v: Vec<String> = PhaseName::ALL
                .iter()
                .map(|&p| format!("{p:?}:{:?}", g.argmax_role(p)))
                .collect();
            format!("phase argmax {} -> {dir}/eval/phase_patch.json", v.join(" "))
        }
        Command::Knockout(_) => {
            let v: Vec<String> = run
                .knockout()?
                .iter()
                .map(|k| format!("{}:{:.3}/{:.3}/{:.3}", k.emotion, k.emotional, k.knocked_out, k.recovered))
                .collect();
            format!("hit rate emotional/knocked-out/recovered {} -> {dir}/heads", v.join(" "))
        }
        Command::RunVeena(_) => {
            let (v, p) = run.run_veena()?;
            format!(
                "baseline {:.3} veena {:.3} veena_plant {:.3} -> {dir}/veena",
                v.baseline, v.veena, p.veena
            )
        }
        Command::Evaluate(_) => {
            let e = run.evaluate()?;
            let v: Vec<String> = e
                .conditions
                .iter()
                .map(|c| format!("{}: H={:.3} WAF={:.3}", c.name, c.hit_rate, c.waf.waf))
                .collect();
            format!("{} -> {dir}/eval", v.join("; "))
        }
        Command::FullPipeline(_) => {
            let s = run.full_pipeline()?;
            format!(
                "heads {} veena_gain {:.3} veena_plant_gain {:.3} -> {dir}/eval/summary.json",
                fmt_pairs(&s.emotions.iter().filter_map(|e| e.top_head).collect::<Vec<_>>()),
                s.evaluation.veena_gain,
                s.evaluation.veena_plant_gain
            )
        }
    };
    Ok(line)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(&cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

