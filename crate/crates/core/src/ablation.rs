//! Retrains a preset with one component disabled (or one setting swept)
//! and tabulates evaluation metrics per variant and seed.

use serde::Serialize;
use spast_tensor::ParamSet;

use crate::error::{Result, SpastError};
use crate::eval_metrics::{evaluate_images, EvalReport, Metrics};
use crate::feature_codec::{Encoder, ImageTensor};
use crate::losses::LossReport;
use crate::style_prior::{train_prior, StylePrior};
use crate::trainer::{build_corpus, build_encoder, content_image, style_image, Corpus, DataPipeline, TrainConfig, TrainerState};

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
    /// Use a prior trained on content photos instead of the style corpus,
    /// i.e. a prior that was never adapted to artworks.
    pub generic_prior: bool,
}

impl Variant {
    fn new(name: &str, overrides: &[(&str, &str)]) -> Variant {
        Variant {
            name: name.into(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            generic_prior: false,
        }
    }

    pub fn full() -> Variant {
        Variant::new("full", &[])
    }

    /// `sp`, `adv`, `lwssm`, `gwssm` or `sd` alone, or `all` for the full
    /// model followed by the four removals.
    pub fn for_term(term: &str) -> Result<Vec<Variant>> {
        let one = match term {
            "all" => {
                let mut v = vec![Variant::full()];
                for t in ["sp", "adv", "lwssm", "gwssm"] {
                    v.extend(Variant::for_term(t)?.into_iter().skip(1));
                }
                return Ok(v);
            }
            "sp" => Variant::new("w/o L_sp", &[("loss.style_prior", "0")]),
            "adv" => Variant::new("w/o L_adv", &[("loss.adversarial", "0")]),
            "lwssm" => Variant::new("w/o LWSSM", &[("lgwssm.local", "false")]),
            "gwssm" => Variant::new("w/o GWSSM", &[("lgwssm.global", "false")]),
            "sd" => Variant {
                generic_prior: true,
                ..Variant::new("w/ generic prior", &[])
            },
            other => {
                return Err(SpastError::Config(format!(
                    "unknown ablation term `{other}` (expected all, sp, adv, lwssm, gwssm or sd)"
                )))
            }
        };
        Ok(vec![Variant::full(), one])
    }

    /// One variant per fixed prior timestep.
    pub fn timestep_sweep(steps: &[usize]) -> Vec<Variant> {
        steps
            .iter()
            .map(|t| {
                let t = t.to_string();
                Variant::new(&format!("t={t}"), &[("prior.t_fixed", &t), ("prior.t_sample", "false")])
            })
            .collect()
    }

    /// One variant per value of a config key, e.g. a loss weight.
    pub fn sweep(key: &str, values: &[String]) -> Vec<Variant> {
        values
            .iter()
            .map(|v| Variant::new(&format!("{key}={v}"), &[(key, v)]))
            .collect()
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Artifacts reused by every run: corpus, pretrained encoder and the
/// priors, trained on first use.
pub struct Shared {
    pub corpus: Corpus,
    pub encoder: Encoder,
    pub decoder: Option<ParamSet>,
    priors: Vec<((bool, String), StylePrior)>,
}

impl Shared {
    pub fn prepare(base: &TrainConfig) -> Result<Shared> {
        let corpus = build_corpus(base)?;
        let (encoder, decoder) = build_encoder(base, &corpus)?;
        Ok(Shared {
            corpus,
            encoder,
            decoder,
            priors: Vec::new(),
        })
    }

    /// The prior for `cfg`, trained once per distinct prior configuration.
    pub fn prior(&mut self, cfg: &TrainConfig, generic: bool) -> Result<StylePrior> {
        let pc = cfg.prior_config();
        // The fixed or sampled timestep only matters when the prior is used.
        let training_key = serde_json::to_string(&crate::style_prior::PriorConfig {
            t_fixed: 0,
            t_sample: false,
            include_jacobian: false,
            ..pc.clone()
        })?;
        let key = (generic, training_key);
        let trained = match self.priors.iter().find(|(k, _)| *k == key) {
            Some((_, p)) => p.clone(),
            None => {
                let mut p = StylePrior::new(pc.clone(), self.encoder.clone(), if generic { "generic" } else { "style" })?;
                let images = if generic { &self.corpus.contents } else { &self.corpus.styles };
                train_prior(&mut p, images, |_| {})?;
                self.priors.push((key, p.clone()));
                p
            }
        };
        Ok(StylePrior { config: pc, ..trained })
    }
}

/// Held-out procedural images, disjoint from the training corpus indices.
pub fn holdout(contents: usize, styles: usize, size: usize, seed: u64) -> (Vec<(String, ImageTensor)>, Vec<(String, ImageTensor)>) {
    const OFFSET: usize = 100_000;
    (
        (0..contents)
            .map(|i| (format!("content-{i}"), content_image(OFFSET + i, size, seed)))
            .collect(),
        (0..styles)
            .map(|i| (format!("style-{i}"), style_image(OFFSET + i, size, seed)))
            .collect(),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub final_report: LossReport,
    pub eval: EvalReport,
}

/// Trains `variant` from scratch on the shared artifacts and evaluates it
/// on the holdout pairs.
pub fn run_variant(
    base: &TrainConfig,
    shared: &mut Shared,
    variant: &Variant,
    eval_contents: &[(String, ImageTensor)],
    eval_styles: &[(String, ImageTensor)],
) -> Result<VariantRun> {
    let cfg = variant.apply(base)?;
    let prior = if cfg.loss.style_prior > 0.0 {
        Some(shared.prior(&cfg, variant.generic_prior)?)
    } else {
        None
    };
    let mut state = TrainerState::new(cfg.clone(), shared.encoder.clone(), prior)?;
    if cfg.decoder_warm_start {
        if let Some(d) = &shared.decoder {
            state.warm_start_decoder(d)?;
        }
    }
    let data = DataPipeline::new(shared.corpus.clone(), cfg.resize, cfg.crop)?;
    let mut last = LossReport::default();
    state.train(&data, |r| last = *r)?;
    let eval = evaluate_images(&state.inference_model(), &shared.encoder, eval_contents, eval_styles)?;
    Ok(VariantRun {
        variant: variant.name.clone(),
        seed: cfg.seed,
        final_report: last,
        eval,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AblationTable {
    pub runs: Vec<VariantRun>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn variants(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        names
    }

    /// Mean and sample standard deviation across seeds for each variant.
    pub fn summary(&self) -> Vec<VariantSummary> {
        self.variants()
            .into_iter()
            .map(|name| {
                let ms: Vec<Metrics> = self.runs.iter().filter(|r| r.variant == name).map(|r| r.eval.aggregate).collect();
                let field = |f: fn(&Metrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
                let (c, s, g, p) = (
                    field(|m| m.content_loss),
                    field(|m| m.style_loss),
                    field(|m| m.gram_loss),
                    field(|m| m.perceptual_distance),
                );
                VariantSummary {
                    variant: name,
                    seeds: ms.len(),
                    mean: Metrics {
                        content_loss: c.0,
                        style_loss: s.0,
                        gram_loss: g.0,
                        perceptual_distance: p.0,
                    },
                    std: Metrics {
                        content_loss: c.1,
                        style_loss: s.1,
                        gram_loss: g.1,
                        perceptual_distance: p.1,
                    },
                }
            })
            .collect()
    }

    /// Plain-text metric table, one row per variant.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<24} {:>5} {:>18} {:>18} {:>22} {:>18}\n",
            "variant", "seeds", "content", "style", "gram", "perceptual"
        );
        for s in self.summary() {
            out.push_str(&format!(
                "{:<24} {:>5} {:>9.4} ±{:>7.4} {:>9.4} ±{:>7.4} {:>11.6} ±{:>9.6} {:>9.4} ±{:>7.4}\n",
                s.variant,
                s.seeds,
                s.mean.content_loss,
                s.std.content_loss,
                s.mean.style_loss,
                s.std.style_loss,
                s.mean.gram_loss,
                s.std.gram_loss,
                s.mean.perceptual_distance,
                s.std.perceptual_distance
            ));
        }
        out
    }

    /// Style-loss values of one variant, in seed order.
    pub fn style_losses(&self, variant: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.eval.aggregate.style_loss)
            .collect()
    }
}

/// Runs every variant for every seed. The corpus, encoder, priors and
/// holdout come from `base` and are shared by every run; seeds only change
/// the stylization training.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    holdout_size: (usize, usize),
    mut progress: impl FnMut(&VariantRun),
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    let mut shared = Shared::prepare(base)?;
    let (ec, es) = holdout(holdout_size.0, holdout_size.1, base.resize, base.seed);
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        for v in variants {
            let run = run_variant(&cfg, &mut shared, v, &ec, &es)?;
            progress(&run);
            table.runs.push(run);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_expands_to_five_variants() {
        let names: Vec<String> = Variant::for_term("all").unwrap().into_iter().map(|v| v.name).collect();
        assert_eq!(names, ["full", "w/o L_sp", "w/o L_adv", "w/o LWSSM", "w/o GWSSM"]);
        assert!(Variant::for_term("bogus").is_err());
    }

    #[test]
    fn overrides_apply_to_the_base() {
        let base = TrainConfig::desk();
        let v = &Variant::for_term("gwssm").unwrap()[1];
        let cfg = v.apply(&base).unwrap();
        assert!(cfg.branches.local && !cfg.branches.global);
        let t = &Variant::timestep_sweep(&[200])[0];
        assert_eq!(t.apply(&base).unwrap().prior.t_fixed, 200);
    }

    #[test]
    fn sample_std_of_constant_is_zero() {
        assert_eq!(mean_std(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
