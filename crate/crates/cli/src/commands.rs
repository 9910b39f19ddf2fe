use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use amd_core::data::io::{
    load_checkpoint, load_nbest, save_checkpoint, save_nbest, write_atomic, NBestRecord,
};
use amd_core::data::{generate, Split, Utterance};
use amd_core::eval::{
    evaluate, format_speedup, mapsswe, one_best_wer, rtf, tradeoff_svg, EvalReport, TradeoffPoint,
};
use amd_core::model::{train_with_progress, Hyper, ToyDecoderParams};
use amd_core::par::with_workers;
use amd_core::search::{decode_corpus, DecodeStats, Decoded, DecoderKind};
use amd_core::{BlockScheduleSpec, Exec, SearchConfig, Vocab};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{
    parse_split, read_json, read_meta, read_refs, read_split, read_vocab, write_corpus, write_json,
};
use crate::error::{CliError, Result};
use crate::Command;

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeTiming {
    pub decode_s: f64,
    pub audio_s: f64,
    pub rtf: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub decoder: DecoderKind,
    pub schedule: BlockScheduleSpec,
    pub amd_calls: u64,
    pub ar_calls: u64,
    pub wer: f64,
    pub rtf: f64,
    pub speedup: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SigReport {
    pub segments: usize,
    pub z: f64,
    pub significant: bool,
}

pub fn run(cmd: Command, mut cfg: RunConfig, out: &Path) -> Result<()> {
    if let Command::Decode { split, decoder, .. } = &cmd {
        if let Some(s) = split {
            cfg.decode.split = parse_split(s)?;
        }
        if let Some(d) = decoder {
            cfg.decode.decoder = d.parse()?;
        }
    }
    if let Command::Bench { split: Some(s), .. } | Command::Analyze { split: Some(s), .. } = &cmd {
        cfg.decode.split = parse_split(s)?;
    }
    fs::create_dir_all(out).map_err(amd_core::Error::from)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let workers = cfg.workers;
    with_workers(workers, move || match cmd {
        Command::Gen => gen(&cfg, out),
        Command::Train { corpus } => train(&cfg, &corpus, out),
        Command::Decode { corpus, model, .. } => decode(&cfg, &corpus, &model, out),
        Command::Bench { corpus, model, .. } => bench(&cfg, &corpus, &model, out),
        Command::Analyze {
            corpus,
            nbest,
            timing,
            ..
        } => analyze(&cfg, &corpus, &nbest, timing.as_deref(), out),
        Command::Sig { a, b } => sig(&a, &b, out),
    })
}

fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = generate(&cfg.data)?;
    write_corpus(out, &corpus, cfg.data.feat_dim)?;
    println!(
        "wrote {} train, {} dev, {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let vocab = read_vocab(corpus)?;
    let meta = read_meta(corpus)?;
    let data = read_split(corpus, Split::Train, &vocab)?;
    let hyper = Hyper {
        vocab: vocab.size(),
        feat_dim: meta.feat_dim,
        ..cfg.model
    };
    let mut params = ToyDecoderParams::init(hyper, cfg.seed)?;
    let t0 = Instant::now();
    let trace = train_with_progress(
        &mut params,
        &data,
        &vocab,
        &cfg.train,
        Exec::default(),
        &mut |p| {
            if p.step % 100 == 0 {
                eprintln!("{} step {:>5} loss {:.4}", p.stage.name(), p.step, p.loss);
            }
        },
    )?;
    let train_s = t0.elapsed().as_secs_f64();
    save_checkpoint(&out.join("model.amdp"), &params)?;
    let mut lines = String::new();
    for p in &trace.points {
        lines.push_str(&serde_json::to_string(p).map_err(|e| CliError::Format(e.to_string()))?);
        lines.push('\n');
    }
    write_atomic(&out.join("trace.jsonl"), lines.as_bytes())?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "train_s": train_s }),
    )?;
    let last = trace.points.last().map_or(f64::NAN, |p| p.loss);
    println!(
        "trained {} steps in {train_s:.1} s, final loss {last:.4}",
        trace.points.len()
    );
    Ok(())
}

/// Model and split, checked against each other.
fn load_inputs(
    cfg: &RunConfig,
    corpus: &Path,
    model: &Path,
) -> Result<(Vocab, ToyDecoderParams, Vec<Utterance>)> {
    let vocab = read_vocab(corpus)?;
    let params = load_checkpoint(model)?;
    let meta = read_meta(corpus)?;
    if params.hyper().vocab != vocab.size() || params.hyper().feat_dim != meta.feat_dim {
        return Err(amd_core::Error::Invalid(
            "model does not match the corpus vocabulary or features".into(),
        )
        .into());
    }
    let utts = read_split(corpus, cfg.decode.split, &vocab)?;
    Ok((vocab, params, utts))
}

fn timing_of(decoded: &[Decoded], utts: &[Utterance]) -> Result<DecodeTiming> {
    let decode_s: f64 = decoded.iter().map(|d| d.stats.wall_time_s).sum();
    let audio_s: f64 = utts.iter().map(|u| u.enc.duration_s()).sum();
    Ok(DecodeTiming {
        decode_s,
        audio_s,
        rtf: rtf(decode_s, audio_s)?,
    })
}

fn total_stats(decoded: &[Decoded]) -> DecodeStats {
    let mut s = DecodeStats::default();
    decoded.iter().for_each(|d| s.add(&d.stats));
    s
}

fn decode(cfg: &RunConfig, corpus: &Path, model: &Path, out: &Path) -> Result<()> {
    let (vocab, params, utts) = load_inputs(cfg, corpus, model)?;
    let decoded = decode_corpus(
        cfg.decode.decoder,
        &params,
        &utts,
        &vocab,
        &cfg.search,
        Exec::default(),
    )?;
    let timing = timing_of(&decoded, &utts)?;
    // wall time lives in timing.json so the N-best file is reproducible
    let records: Vec<NBestRecord> = utts
        .iter()
        .zip(&decoded)
        .map(|(u, d)| {
            let stats = DecodeStats {
                wall_time_s: 0.0,
                ..d.stats
            };
            NBestRecord::from_list(u.id, &d.nbest, stats, &vocab)
        })
        .collect();
    save_nbest(&out.join("nbest.jsonl"), &records)?;
    write_json(&out.join("timing.json"), &timing)?;
    let stats = total_stats(&decoded);
    println!(
        "decoded {} utterances, {} AMD calls, {} AR calls, RTF {:.4}",
        utts.len(),
        stats.amd_calls,
        stats.ar_calls,
        timing.rtf
    );
    Ok(())
}

fn bench(cfg: &RunConfig, corpus: &Path, model: &Path, out: &Path) -> Result<()> {
    let (vocab, params, utts) = load_inputs(cfg, corpus, model)?;
    let refs: Vec<_> = utts.iter().map(|u| u.reference.clone()).collect();
    let run = |kind: DecoderKind, search: &SearchConfig| -> Result<(Vec<Decoded>, f64, f64)> {
        let decoded = decode_corpus(kind, &params, &utts, &vocab, search, Exec::default())?;
        let lists: Vec<Vec<Vec<_>>> = decoded
            .iter()
            .map(|d| {
                d.nbest
                    .entries()
                    .iter()
                    .map(|e| e.hyp.labels().to_vec())
                    .collect()
            })
            .collect();
        let wer = one_best_wer(&lists, &refs)?;
        let r = timing_of(&decoded, &utts)?.rtf;
        Ok((decoded, wer, r))
    };

    let base_cfg = SearchConfig {
        weights: amd_core::FusionWeights::baseline(),
        ..cfg.search.clone()
    };
    let (decoded, wer, base_rtf) = run(DecoderKind::Baseline, &base_cfg)?;
    let stats = total_stats(&decoded);
    let mut rows = vec![BenchRow {
        decoder: DecoderKind::Baseline,
        schedule: BlockScheduleSpec::Fixed(1),
        amd_calls: stats.amd_calls,
        ar_calls: stats.ar_calls,
        wer,
        rtf: base_rtf,
        speedup: 1.0,
    }];
    for &schedule in &cfg.bench.schedules {
        let search = SearchConfig {
            schedule,
            ..cfg.search.clone()
        };
        let (decoded, wer, r) = run(DecoderKind::Tripartite, &search)?;
        let stats = total_stats(&decoded);
        rows.push(BenchRow {
            decoder: DecoderKind::Tripartite,
            schedule,
            amd_calls: stats.amd_calls,
            ar_calls: stats.ar_calls,
            wer,
            rtf: r,
            speedup: base_rtf / r,
        });
    }

    let mut table = String::from("decoder\tschedule\tamd_calls\tar_calls\twer\trtf\tspeedup\n");
    for r in &rows {
        let decoder = match r.decoder {
            DecoderKind::Baseline => "baseline",
            DecoderKind::Tripartite => "tripartite",
        };
        let _ = writeln!(
            table,
            "{decoder}\t{}\t{}\t{}\t{:.2}\t{:.5}\t{}",
            r.schedule,
            r.amd_calls,
            r.ar_calls,
            r.wer,
            r.rtf,
            format_speedup(r.speedup)
        );
    }
    let points: Vec<TradeoffPoint> = rows
        .iter()
        .map(|r| TradeoffPoint {
            label: match r.decoder {
                DecoderKind::Baseline => "baseline".into(),
                DecoderKind::Tripartite => r.schedule.to_string(),
            },
            rtf: r.rtf,
            wer: r.wer,
        })
        .collect();
    write_atomic(&out.join("bench.tsv"), table.as_bytes())?;
    write_json(&out.join("bench.json"), &rows)?;
    write_atomic(&out.join("tradeoff.svg"), tradeoff_svg(&points).as_bytes())?;
    print!("{table}");
    Ok(())
}

fn analyze(
    cfg: &RunConfig,
    corpus: &Path,
    nbest: &Path,
    timing: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let vocab = read_vocab(corpus)?;
    let refs = read_refs(corpus, cfg.decode.split, &vocab)?;
    let records = load_nbest(nbest)?;
    let mut by_id: HashMap<u32, &NBestRecord> = records.iter().map(|r| (r.id, r)).collect();
    if by_id.len() != records.len() || records.len() != refs.len() {
        return Err(amd_core::Error::Invalid(
            "N-best ids must match the references one to one".into(),
        )
        .into());
    }
    let mut ids = Vec::with_capacity(refs.len());
    let mut lists = Vec::with_capacity(refs.len());
    let mut ref_ids = Vec::with_capacity(refs.len());
    for (id, r) in refs {
        let rec = by_id.remove(&id).ok_or_else(|| {
            amd_core::Error::Invalid(format!("no N-best list for utterance {id}"))
        })?;
        ids.push(id);
        lists.push(rec.token_ids(&vocab)?);
        ref_ids.push(r);
    }
    let timing = match timing {
        Some(p) => {
            let t: DecodeTiming = read_json(p)?;
            Some((t.decode_s, t.audio_s))
        }
        None => None,
    };
    let report = evaluate(&ids, &lists, &ref_ids, timing)?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "WER {:.2}  oracle WER {:.2}  lattice density {:.3}{}",
        report.wer,
        report.oracle_wer,
        report.lattice_density,
        report
            .rtf
            .map_or(String::new(), |r| format!("  RTF {r:.4}"))
    );
    Ok(())
}

fn sig(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let ra: EvalReport = read_json(a)?;
    let rb: EvalReport = read_json(b)?;
    let ids = |r: &EvalReport| r.utts.iter().map(|u| u.id).collect::<Vec<_>>();
    if ids(&ra) != ids(&rb) {
        return Err(amd_core::Error::Invalid("reports cover different utterances".into()).into());
    }
    let errs = |r: &EvalReport| {
        r.utts
            .iter()
            .map(|u| u.ops.errors() as f64)
            .collect::<Vec<_>>()
    };
    let m = mapsswe(&errs(&ra), &errs(&rb))?;
    let report = SigReport {
        segments: ra.utts.len(),
        z: m.z,
        significant: m.significant,
    };
    write_json(&out.join("sig.json"), &report)?;
    println!(
        "z = {:.4}, {} at 0.05",
        m.z,
        if m.significant {
            "significant"
        } else {
            "not significant"
        }
    );
    Ok(())
}
