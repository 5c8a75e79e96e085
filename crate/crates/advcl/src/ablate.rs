//! Ablation harness: runs shared-seed pipeline cells over a swept setting
//! and emits comparison tables (CSV + markdown) with SA/RA columns.

use crate::cluster::{build_pseudo_tables, extract_features, PseudoLabelTable};
use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::{eval_ra, eval_sa};
use crate::finetune::{finetune, FinetuneMode};
use crate::manifest::{append_jsonl, cached, stage_dir, RunManifest, Stage};
use crate::model::{load_model, save_model};
use crate::pretrain::{pretrain, simclr_pretrain, ViewRecipe};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which setting the harness sweeps.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateKind {
    Views,
    Lambda,
    Klist,
    FinetuneModes,
}

impl std::str::FromStr for AblateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "views" => Ok(AblateKind::Views),
            "lambda" => Ok(AblateKind::Lambda),
            "klist" => Ok(AblateKind::Klist),
            "finetune_modes" | "finetune-modes" => Ok(AblateKind::FinetuneModes),
            other => Err(Error::Config(format!("unknown ablation kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateRow {
    pub name: String,
    pub sa: f64,
    pub ra: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateTable {
    pub kind: AblateKind,
    pub rows: Vec<AblateRow>,
}

impl AblateTable {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("name,sa,ra\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.4},{:.4}\n", r.name, r.sa, r.ra));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn save_markdown(&self, path: &Path) -> Result<()> {
        let mut s = String::from("| setting | SA (%) | RA (%) |\n|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} |\n",
                r.name,
                100.0 * r.sa,
                100.0 * r.ra
            ));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Pseudo tables for a config: a contrastively pretrained feature extractor
/// (the desk-scale default for `f_pre`) feeds K-means. Cached by content
/// hash.
pub fn pseudo_tables_for(
    cfg: &ExperimentConfig,
    root: &Path,
    fpre_ckpt: Option<&Path>,
) -> Result<PseudoLabelTable> {
    let train = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    let (fpre, fingerprint) = match fpre_ckpt {
        Some(path) => {
            let (model, state) = load_model(path)?;
            (model, state.fingerprint())
        }
        None => {
            // default f_pre: standard contrastive pretraining on the same data
            let mut fpre_cfg = cfg.clone();
            fpre_cfg.pretrain.lambda = 0.0;
            let dir = stage_dir(root, Stage::Pretrain, &fpre_cfg, &["simclr-fpre"]);
            let ckpt = dir.join("encoder.json");
            if cached(&dir).is_none() {
                let out = simclr_pretrain(&fpre_cfg.to_pretrain_config(), &train, Some(&dir))?;
                let fp = save_model(&out.model, &fpre_cfg.content_hash(), &ckpt)?;
                let mut manifest = RunManifest::new(Stage::Pretrain, &fpre_cfg, vec![]);
                manifest.outputs.push(ckpt.clone());
                manifest.save(&dir)?;
                drop(fp);
            }
            let (model, state) = load_model(&ckpt)?;
            (model, state.fingerprint())
        }
    };
    let feats = extract_features(&fpre, &train, cfg.eval.batch_size)?;
    build_pseudo_tables(&feats, &cfg.pretrain.k_list, cfg.run.seed, &fingerprint)
}

/// Runs pretrain → finetune → eval for one configuration, reusing cached
/// pretraining stages. Returns `(sa, ra)` on the test split.
pub fn run_cell(cfg: &ExperimentConfig, root: &Path) -> Result<AblateRow> {
    let train = cfg.dataset.load(Split::Train, cfg.run.seed)?;
    let test = cfg.dataset.load(Split::Test, cfg.run.seed)?;

    let table = if cfg.pretrain.lambda > 0.0 {
        Some(pseudo_tables_for(cfg, root, None)?)
    } else {
        None
    };

    let dir = stage_dir(root, Stage::Pretrain, cfg, &["advcl"]);
    let ckpt = dir.join("encoder.json");
    if cached(&dir).is_none() {
        let out = pretrain(
            &cfg.to_pretrain_config(),
            &train,
            table.as_ref(),
            Some(&dir),
            None,
        )?;
        save_model(&out.model, &cfg.content_hash(), &ckpt)?;
        let mut manifest = RunManifest::new(Stage::Pretrain, cfg, vec![]);
        manifest.outputs.push(ckpt.clone());
        manifest.save(&dir)?;
    }
    let (model, _) = load_model(&ckpt)?;

    let tuned = finetune(model, &train, &test, &cfg.to_finetune_config())?;
    let sa = eval_sa(&tuned.model, &test, cfg.eval.batch_size)?;
    let ra = eval_ra(
        &tuned.model,
        &test,
        &cfg.eval.budget.to_budget(),
        cfg.eval.batch_size,
        cfg.run.seed,
    )?;
    Ok(AblateRow {
        name: String::new(),
        sa,
        ra,
    })
}

fn cell_rows(kind: AblateKind, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    match kind {
        AblateKind::Views => ViewRecipe::ALL
            .iter()
            .map(|&r| {
                let mut c = base.clone();
                c.pretrain.views = r;
                (r.name().to_string(), c)
            })
            .collect(),
        AblateKind::Lambda => {
            let mut rows = Vec::new();
            let mut off = base.clone();
            off.pretrain.lambda = 0.0;
            rows.push(("w/o ClusterFit".to_string(), off));
            let lambda = if base.pretrain.lambda > 0.0 {
                base.pretrain.lambda
            } else {
                0.2
            };
            let mut on = base.clone();
            on.pretrain.lambda = lambda;
            rows.push((
                format!("ensemble K={:?} lambda={lambda}", on.pretrain.k_list),
                on,
            ));
            rows
        }
        AblateKind::Klist => {
            let mut rows: Vec<(String, ExperimentConfig)> = base
                .pretrain
                .k_list
                .iter()
                .map(|&k| {
                    let mut c = base.clone();
                    c.pretrain.k_list = vec![k];
                    if c.pretrain.lambda == 0.0 {
                        c.pretrain.lambda = 0.2;
                    }
                    (format!("K={k}"), c)
                })
                .collect();
            let mut ens = base.clone();
            if ens.pretrain.lambda == 0.0 {
                ens.pretrain.lambda = 0.2;
            }
            rows.push(("ensemble".to_string(), ens));
            rows
        }
        AblateKind::FinetuneModes => [FinetuneMode::Slf, FinetuneMode::Alf, FinetuneMode::Aff]
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.finetune.mode = m;
                (format!("{m:?}").to_lowercase(), c)
            })
            .collect(),
    }
}

/// Runs the ablation grid with shared seeds; completed cells are reloaded
/// from the per-cell result cache, so interrupted grids resume.
pub fn ablate(kind: AblateKind, base: &ExperimentConfig, out_dir: &Path) -> Result<AblateTable> {
    std::fs::create_dir_all(out_dir)?;
    let root = base.artifact_root();
    let mut rows = Vec::new();
    for (name, cfg) in cell_rows(kind, base) {
        let cell_path = out_dir.join(format!("cell_{}.json", cfg.content_hash()));
        let row = if cell_path.exists() {
            let mut row: AblateRow =
                serde_json::from_str(&std::fs::read_to_string(&cell_path)?)?;
            row.name = name;
            row
        } else {
            let mut row = run_cell(&cfg, &root)?;
            row.name = name;
            std::fs::write(&cell_path, serde_json::to_string(&row)?)?;
            append_jsonl(&out_dir.join("progress.jsonl"), &row)?;
            row
        };
        rows.push(row);
    }
    let table = AblateTable { kind, rows };
    table.save_csv(&out_dir.join("ablation.csv"))?;
    table.save_markdown(&out_dir.join("ablation.md"))?;
    Ok(table)
}
