use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    CalibrateArgs, Command, DetectArgs, IndexArgs, PerturbArgs, RetrieveArgs, RunConfig, CACHE_ENV,
};
use crate::calibration::{
    calibrate, emit_sweep_csv, emit_weight_csv, render_sweep_png, render_weight_png, write_atomic,
    LabeledScoreSet, ScoreEntry, ScoreLabel,
};
use crate::decision::{decide, CopyType, CopyVerdict, DecisionConfig, VerdictRecord};
use crate::error::{Error, Result};
use crate::features::{CachedBackend, EmbedderBackend, EmbeddingCache, SyntheticEmbedder};
use crate::fusion::Fuser;
use crate::gallery::{
    build_index, copy_rate, gallery_items, summarize, top_k_image, EvalReport, GalleryIndex,
    PairLabel, PairManifest,
};
use crate::image::ImageBuffer;
use crate::perturb::{apply, emit_robustness_csv, robustness_csv, robustness_report};
use crate::rapta::{augment, load_templates, ScriptedDetector};

pub(super) fn dispatch(command: Command, mut config: RunConfig, out: &Path) -> Result<()> {
    match &command {
        Command::Calibrate(a) => {
            if let Some(o) = a.objective {
                config.calibration.objective = o.into();
            }
        }
        Command::Retrieve(a) => {
            if let Some(k) = a.k {
                config.retrieval.k = k;
            }
        }
        Command::Robustness(a) => {
            if let Some(side) = a.side {
                config.robustness.side = side.into();
            }
        }
        Command::Augment(a) => {
            if let Some(path) = &a.templates {
                config.rapta.templates = load_templates(path)?
                    .iter()
                    .map(|t| t.source().to_string())
                    .collect();
            }
        }
        _ => {}
    }
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(
        &out.join("effective_config.toml"),
        config.to_toml().as_bytes(),
    )?;

    let backend = make_backend(&config)?;
    let fuser = Fuser::new(config.fusion.clone())?;
    let ctx = Ctx {
        config: &config,
        backend: backend.as_ref(),
        fuser: &fuser,
        out,
    };
    match command {
        Command::Detect(a) => ctx.detect(a),
        Command::Calibrate(a) => ctx.calibrate(a),
        Command::Retrieve(a) => ctx.retrieve(a),
        Command::Index(a) => ctx.index(a),
        Command::Robustness(a) => ctx.robustness(&a.generated, &a.reference),
        Command::Augment(a) => ctx.augment(&a.image, &a.prompt, a.detections.as_deref()),
        Command::Perturb(a) => ctx.perturb(a),
    }
}

fn make_backend(config: &RunConfig) -> Result<Box<dyn EmbedderBackend>> {
    let base = SyntheticEmbedder::new(config.backend.dim, config.backend.seed)?;
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => Ok(Box::new(CachedBackend::new(
            base,
            EmbeddingCache::open(PathBuf::from(dir))?,
        ))),
        _ => Ok(Box::new(base)),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    format!(
        "{}\n",
        serde_json::to_string_pretty(value).expect("output serializes")
    )
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| format!("{}\n", serde_json::to_string(r).expect("output serializes")))
        .collect()
}

#[derive(Serialize)]
struct DetectSummary {
    pairs: usize,
    counts: BTreeMap<CopyType, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    evaluation: Option<EvalReport>,
}

#[derive(Serialize)]
struct DecisionFragment<'a> {
    decision: &'a DecisionConfig,
}

struct Ctx<'a> {
    config: &'a RunConfig,
    backend: &'a dyn EmbedderBackend,
    fuser: &'a Fuser,
    out: &'a Path,
}

impl Ctx<'_> {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out.join(name), contents.as_bytes())
    }

    fn detect(&self, args: DetectArgs) -> Result<()> {
        let (records, evaluation) = match (args.generated, args.reference, args.manifest) {
            (Some(g), Some(r), _) => {
                let v = decide(
                    &ImageBuffer::load(&g)?,
                    &ImageBuffer::load(&r)?,
                    self.backend,
                    self.fuser,
                    &self.config.decision,
                )?;
                (
                    vec![VerdictRecord::new(
                        g.display().to_string(),
                        r.display().to_string(),
                        &v,
                    )],
                    None,
                )
            }
            (_, _, Some(m)) => {
                let manifest = PairManifest::load(&m)?;
                let verdicts = manifest.decide(self.backend, self.fuser, &self.config.decision)?;
                let labels: Vec<PairLabel> = manifest.rows.iter().map(|r| r.label).collect();
                let records = manifest
                    .rows
                    .iter()
                    .zip(&verdicts)
                    .map(|(row, v)| {
                        VerdictRecord::new(
                            row.query.display().to_string(),
                            row.reference.display().to_string(),
                            v,
                        )
                    })
                    .collect();
                (records, Some(summarize(&labels, &verdicts)?))
            }
            _ => {
                return Err(Error::config(
                    "detect needs --generated/--reference or --manifest",
                ))
            }
        };
        let mut counts: BTreeMap<CopyType, usize> =
            [CopyType::Retrieve, CopyType::Style, CopyType::NotCopy]
                .into_iter()
                .map(|t| (t, 0))
                .collect();
        for r in &records {
            *counts.entry(r.copy_type).or_default() += 1;
        }
        let summary = to_json(&DetectSummary {
            pairs: records.len(),
            counts,
            evaluation,
        });
        self.write("verdicts.jsonl", &to_jsonl(&records))?;
        self.write("summary.json", &summary)?;
        print!("{summary}");
        Ok(())
    }

    fn calibrate(&self, args: CalibrateArgs) -> Result<()> {
        let set = match (args.scores, args.manifest) {
            (Some(path), _) => LabeledScoreSet::load(&path)?,
            (None, Some(path)) => {
                let manifest = PairManifest::load(&path)?;
                let verdicts = manifest.decide(self.backend, self.fuser, &self.config.decision)?;
                let entries = manifest
                    .rows
                    .iter()
                    .zip(&verdicts)
                    .map(|(row, v)| score_entry(row.label, &row.query, &row.reference, v))
                    .collect();
                let set = LabeledScoreSet::new(entries)?;
                self.write("scores.jsonl", &set.to_jsonl())?;
                set
            }
            (None, None) => return Err(Error::config("calibrate needs --scores or --manifest")),
        };
        let run = calibrate(&set, &self.config.calibration)?;
        emit_sweep_csv(&run.sweep, &self.out.join("sweep.csv"))?;
        emit_weight_csv(&run.weights, &self.out.join("weights.csv"))?;
        if args.plots {
            for result in [
                render_sweep_png(&run.sweep, &self.out.join("sweep.png")),
                render_weight_png(&run.weights, &self.out.join("weights.png")),
            ] {
                if let Err(e) = result {
                    eprintln!("copyforge: warning: plot not written: {e}");
                }
            }
        }
        let fragment = toml::to_string(&DecisionFragment {
            decision: &run.summary.decision,
        })
        .expect("decision serializes");
        self.write("calibrated.toml", &fragment)?;
        let summary = to_json(&run.summary);
        self.write("calibration.json", &summary)?;
        print!("{summary}");
        Ok(())
    }

    fn index(&self, args: IndexArgs) -> Result<()> {
        let dir = args.index.unwrap_or_else(|| self.out.join("index"));
        let items = gallery_items(&args.gallery)?;
        let (index, failures) = build_index(&items, self.backend, self.fuser)?;
        for f in &failures {
            eprintln!(
                "copyforge: warning: skipped {}: {}",
                f.source.display(),
                f.error
            );
        }
        index.save(&dir)?;
        #[derive(Serialize)]
        struct Report<'a> {
            indexed: usize,
            index: String,
            failures: &'a [crate::gallery::ItemFailure],
        }
        let report = to_json(&Report {
            indexed: index.len(),
            index: dir.display().to_string(),
            failures: &failures,
        });
        self.write("index_report.json", &report)?;
        print!("{report}");
        Ok(())
    }

    fn retrieve(&self, args: RetrieveArgs) -> Result<()> {
        let index = GalleryIndex::load(&args.index, self.fuser, &self.backend.id())?;
        if args.query.is_dir() {
            let queries = gallery_items(&args.query)?
                .into_iter()
                .map(|item| Ok((item.id, ImageBuffer::load(&item.source)?)))
                .collect::<Result<Vec<_>>>()?;
            let report = copy_rate(
                &queries,
                &index,
                self.backend,
                self.fuser,
                &self.config.decision,
            )?;
            let records: Vec<VerdictRecord> = report
                .verdicts
                .iter()
                .map(|q| VerdictRecord::new(q.query.clone(), q.reference.clone(), &q.verdict))
                .collect();
            #[derive(Serialize)]
            struct Rate {
                rate: f64,
                flagged: usize,
                total: usize,
                tau1: f64,
            }
            let summary = to_json(&Rate {
                rate: report.rate,
                flagged: report.flagged,
                total: report.total,
                tau1: self.config.decision.tau1,
            });
            self.write("copy_verdicts.jsonl", &to_jsonl(&records))?;
            self.write("copy_rate.json", &summary)?;
            print!("{summary}");
        } else {
            let query = ImageBuffer::load(&args.query)?;
            let hits = top_k_image(
                &query,
                &index,
                self.backend,
                self.fuser,
                self.config.retrieval.k,
            )?;
            let mut table = String::from("rank,id,s_fus\n");
            for (i, m) in hits.iter().enumerate() {
                table.push_str(&format!("{},{},{}\n", i + 1, m.id, m.score));
            }
            self.write("retrieval.csv", &table)?;
            print!("{table}");
        }
        Ok(())
    }

    fn robustness(&self, generated: &Path, reference: &Path) -> Result<()> {
        let rows = robustness_report(
            &ImageBuffer::load(generated)?,
            &ImageBuffer::load(reference)?,
            &self.config.attacks(),
            self.backend,
            self.fuser,
            &self.config.decision,
            self.config.robustness.side,
        )?;
        emit_robustness_csv(&rows, &self.out.join("robustness.csv"))?;
        print!("{}", robustness_csv(&rows));
        Ok(())
    }

    fn augment(&self, image: &Path, prompt: &str, detections: Option<&Path>) -> Result<()> {
        let detector = match detections {
            Some(path) => ScriptedDetector::load(path)?,
            None => ScriptedDetector::default(),
        };
        let img = ImageBuffer::load(image)?;
        let (trace, _) = augment(
            &img,
            prompt,
            &detector,
            self.backend,
            &self.config.rapta,
            self.config.seed,
        )?;
        self.write(
            "augment_trace.jsonl",
            &to_jsonl(std::slice::from_ref(&trace)),
        )?;
        println!("{}", trace.sampled);
        Ok(())
    }

    fn perturb(&self, args: PerturbArgs) -> Result<()> {
        let all = self.config.attacks();
        let selected: Vec<_> = if args.attacks.is_empty() {
            all
        } else {
            let mut chosen = Vec::new();
            for name in &args.attacks {
                let spec = all.iter().find(|s| s.name() == name).ok_or_else(|| {
                    Error::config(format!("unknown or unconfigured attack `{name}`"))
                })?;
                chosen.push(spec.clone());
            }
            chosen
        };
        let img = ImageBuffer::load(&args.image)?;
        let dir = self.out.join("perturbed");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        #[derive(Serialize)]
        struct Row<'a> {
            attack: &'a crate::perturb::PerturbationSpec,
            file: String,
            height: usize,
            width: usize,
            digest: String,
        }
        let mut rows = Vec::new();
        for (i, spec) in selected.iter().enumerate() {
            let out = apply(&img, spec)?;
            let file = format!("{i:02}_{}.png", spec.name());
            out.save_png(&dir.join(&file))?;
            rows.push(Row {
                attack: spec,
                file: format!("perturbed/{file}"),
                height: out.height(),
                width: out.width(),
                digest: out.digest(),
            });
        }
        let listing = to_jsonl(&rows);
        self.write("perturb.jsonl", &listing)?;
        print!("{listing}");
        Ok(())
    }
}

fn score_entry(label: PairLabel, query: &Path, reference: &Path, v: &CopyVerdict) -> ScoreEntry {
    let label = match label {
        PairLabel::Retrieve => ScoreLabel::Retrieve,
        PairLabel::Style => ScoreLabel::Style,
        PairLabel::Noncopy => ScoreLabel::Noncopy,
    };
    let s = &v.scores;
    ScoreEntry {
        query: Some(query.display().to_string()),
        reference: Some(reference.display().to_string()),
        ..ScoreEntry::new(s.s_fus, [s.s_vis, s.s_clip, s.s_tex], label)
    }
}
