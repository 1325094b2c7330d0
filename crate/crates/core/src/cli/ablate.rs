use std::collections::BTreeMap;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::bail;
use serde::Serialize;

use super::{base_config, LoadedData, Manifest, RunConfig, Shared};
use crate::error::Error;
use crate::model::ViTree;
use crate::train::{Examples, LossMode, Trainer};
use crate::tree::LeafStrategy;

/// One training configuration in the sweep, independent of seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Setting {
    pub strategy: LeafStrategy,
    pub depth: usize,
    pub loss: LossMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub acc_v: f64,
    pub acc_t: f64,
    pub acc_combined: f64,
    pub faithfulness: Option<f64>,
    pub runtime_s: f64,
}

impl CellResult {
    /// The accuracy the ablation reports: the backbone head when only the
    /// backbone loss trains, the tree head when only the leaf loss trains,
    /// the combined prediction otherwise.
    pub fn reported(&self, loss: LossMode) -> f64 {
        match loss {
            LossMode::Both => self.acc_combined,
            LossMode::VitOnly => self.acc_v,
            LossMode::LeafOnly => self.acc_t,
        }
    }
}

#[derive(Debug, Serialize)]
struct Row {
    group: &'static str,
    strategy: String,
    depth: usize,
    loss: String,
    seed: String,
    acc_v: String,
    acc_t: String,
    acc_combined: String,
    reported_acc: String,
    faithfulness: String,
    runtime_s: String,
}

fn loss_name(l: LossMode) -> &'static str {
    match l {
        LossMode::Both => "both",
        LossMode::VitOnly => "vit-only",
        LossMode::LeafOnly => "leaf-only",
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn train_cell(
    base: &RunConfig,
    setting: Setting,
    seed: u64,
    train: &Examples<'_>,
    test: &Examples<'_>,
) -> crate::Result<CellResult> {
    let started = Instant::now();
    let mut model_cfg = base.model.clone();
    model_cfg.tree.strategy = setting.strategy;
    model_cfg.tree.depth = setting.depth;
    model_cfg.seed = seed;
    let mut train_cfg = base.train.clone();
    train_cfg.loss = setting.loss;
    train_cfg.seed = seed;
    let (model, store) = ViTree::new(&model_cfg)?;
    let mut trainer = Trainer::new(model, store, train_cfg)?;
    trainer.fit(train, None, |_, _| Ok(()))?;
    let m = crate::train::evaluate(&trainer.model, &trainer.store, test)?;
    Ok(CellResult {
        acc_v: m.acc_v,
        acc_t: m.acc_t,
        acc_combined: m.acc_combined,
        faithfulness: m.faithfulness,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

pub(super) fn cmd_ablate(shared: &Shared, a: &super::AblateArgs) -> anyhow::Result<Manifest> {
    if a.seeds.is_empty() {
        bail!(Error::Config("--seeds needs at least one seed".into()));
    }
    let mut cfg = base_config(shared)?;
    a.model.apply(&mut cfg.model, &mut cfg.train);
    a.train_flags.apply(&mut cfg.train);
    let train_data = LoadedData::load(&a.train)?;
    let test_data = LoadedData::load(&a.test)?;
    train_data.shape_model(&mut cfg.model, a.model.grid)?;
    cfg.model.validate()?;
    cfg.train.validate()?;

    let default_depth = cfg.model.tree.depth;
    let default_strategy = cfg.model.tree.strategy;
    let mut groups: Vec<(&'static str, Setting)> = Vec::new();
    for &strategy in &a.strategies {
        groups.push(("strategy", Setting { strategy, depth: default_depth, loss: LossMode::Both }));
    }
    for &depth in &a.depths {
        groups.push(("depth", Setting { strategy: default_strategy, depth, loss: LossMode::Both }));
    }
    if !a.no_loss_ablation {
        for loss in [LossMode::VitOnly, LossMode::LeafOnly] {
            groups.push(("loss", Setting { strategy: default_strategy, depth: default_depth, loss }));
        }
    }
    let mut cells: Vec<(Setting, u64)> = Vec::new();
    for (_, s) in &groups {
        for &seed in &a.seeds {
            if !cells.contains(&(*s, seed)) {
                cells.push((*s, seed));
            }
        }
    }

    let train_ex = train_data.examples();
    let test_ex = test_data.examples();
    train_ex.check_model(&ViTree::new(&cfg.model)?.0)?;
    let results: Mutex<BTreeMap<(Setting, u64), CellResult>> = Mutex::new(BTreeMap::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let (setting, seed) = cells[i];
                match train_cell(&cfg, setting, seed, &train_ex, &test_ex) {
                    Ok(r) => {
                        eprintln!(
                            "{} depth {} loss {} seed {seed}: reported {:.4} ({:.1}s)",
                            setting.strategy,
                            setting.depth,
                            loss_name(setting.loss),
                            r.reported(setting.loss),
                            r.runtime_s
                        );
                        results.lock().unwrap().insert((setting, seed), r);
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e.into());
    }
    let results = results.into_inner().unwrap();

    let fmt = |v: f64| format!("{v:.6}");
    let path = shared.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (group, s) in &groups {
        let mut per_seed = Vec::new();
        for &seed in &a.seeds {
            let r = &results[&(*s, seed)];
            per_seed.push(r);
            w.serialize(Row {
                group,
                strategy: s.strategy.to_string(),
                depth: s.depth,
                loss: loss_name(s.loss).into(),
                seed: seed.to_string(),
                acc_v: fmt(r.acc_v),
                acc_t: fmt(r.acc_t),
                acc_combined: fmt(r.acc_combined),
                reported_acc: fmt(r.reported(s.loss)),
                faithfulness: r.faithfulness.map(fmt).unwrap_or_default(),
                runtime_s: format!("{:.3}", r.runtime_s),
            })?;
        }
        let med = |f: &dyn Fn(&CellResult) -> Option<f64>| {
            let mut v: Vec<f64> = per_seed.iter().filter_map(|r| f(r)).collect();
            median(&mut v).map(fmt).unwrap_or_default()
        };
        w.serialize(Row {
            group,
            strategy: s.strategy.to_string(),
            depth: s.depth,
            loss: loss_name(s.loss).into(),
            seed: "median".into(),
            acc_v: med(&|r| Some(r.acc_v)),
            acc_t: med(&|r| Some(r.acc_t)),
            acc_combined: med(&|r| Some(r.acc_combined)),
            reported_acc: med(&|r| Some(r.reported(s.loss))),
            faithfulness: med(&|r| r.faithfulness),
            runtime_s: med(&|r| Some(r.runtime_s)),
        })?;
    }
    w.flush()?;
    drop(w);
    let mut manifest = Manifest::new("ablate", &cfg, cfg.train.seed)?;
    manifest.add_artifact(&path)?;
    let summary = shared.out.join("ablation_summary.txt");
    fs::write(&summary, summarize(&groups, &a.seeds, &results))?;
    manifest.add_artifact(&summary)?;
    Ok(manifest)
}

fn summarize(groups: &[(&str, Setting)], seeds: &[u64], results: &BTreeMap<(Setting, u64), CellResult>) -> String {
    let mut out = String::from("group     strategy    depth loss       median_reported\n");
    for (group, s) in groups {
        let mut v: Vec<f64> = seeds.iter().map(|&seed| results[&(*s, seed)].reported(s.loss)).collect();
        let m = median(&mut v).unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{group:<9} {:<11} {:>5} {:<10} {m:.4}\n",
            s.strategy.to_string(),
            s.depth,
            loss_name(s.loss)
        ));
    }
    out
}
