//! Loss composition, alternating generator/discriminator optimization,
//! checkpoints and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    fake_candidates, global_adversarial_losses, local_adversarial_losses, plan_fake_patches, random_real_crop, sa_loss, Discriminator,
    PatchPlan,
};
use crate::config::{ReconLoss, TrainConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::histogram::sch_loss_with_grad;
use crate::image::Image;
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::nets::{provider_by_name, semantic_vars, Enhancer, EnhancerConfig, ProviderInput, SemanticPrior, SemanticProvider};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::tensor_file;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_sch: f64,
    pub lambda_sa: f64,
}

/// `recon + lambda_sch * sch + lambda_sa * sa`; any non-finite component
/// aborts with its name and the step.
pub fn total_loss(recon: f64, sch: f64, sa: f64, w: LossWeights, step: usize) -> Result<f64> {
    for (component, value) in [("recon", recon), ("sch", sch), ("sa", sa)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component: component.into(), step, value });
        }
    }
    Ok(recon + w.lambda_sch * sch + w.lambda_sa * sa)
}

/// Loss decomposition of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub sch: f64,
    pub sa: f64,
    /// Discriminator objective before its update (0 when SA is off).
    pub disc: f64,
    /// `(batch position, class)` of each selected worst patch.
    pub worst: Vec<(usize, u8)>,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        let worst: Vec<String> = self.worst.iter().map(|(i, c)| format!("{i}:{c}")).collect();
        format!(
            "step={} total={:e} recon={:e} sch={:e} sa={:e} disc={:e} worst={}",
            self.step,
            self.total,
            self.recon,
            self.sch,
            self.sa,
            self.disc,
            if worst.is_empty() { "-".into() } else { worst.join(",") }
        )
    }
}

struct Adversaries {
    store: ParamStore,
    local: Discriminator,
    global: Discriminator,
    adam: Adam,
}

/// Mutable training state over a borrowed dataset.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    dataset: &'a Dataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    provider: Box<dyn SemanticProvider>,
    provider_digest: [u8; 32],
    /// One prior per dataset entry, from its low-light image.
    priors: Vec<SemanticPrior>,
    /// Logits of the normal-light images, for the global discriminator.
    real_logits: Vec<Option<Tensor>>,
    plans: Vec<Option<Vec<PatchPlan>>>,
    pub net: Enhancer,
    pub g_store: ParamStore,
    g_adam: Adam,
    adv: Option<Adversaries>,
    pub step: usize,
    pub best_psnr: f64,
    pub best_step: usize,
    pub log: Vec<String>,
}

fn step_rng(master_seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Class count implied by a dataset's label maps.
pub fn dataset_class_count(dataset: &Dataset) -> usize {
    dataset.entries.iter().flat_map(|e| e.pair.labels.labels().iter()).map(|&l| l as usize + 1).max().unwrap_or(1)
}

/// Provider as selected by the config.
pub fn build_provider(cfg: &TrainConfig, class_count: usize) -> Result<Box<dyn SemanticProvider>> {
    provider_by_name(&cfg.provider, class_count, cfg.semantic_widths, cfg.provider_seed, cfg.prior_dir.as_deref())
}

/// Priors for every entry of `dataset`, from the low-light inputs.
pub fn compute_priors(provider: &dyn SemanticProvider, dataset: &Dataset) -> Result<Vec<SemanticPrior>> {
    dataset
        .entries
        .iter()
        .map(|e| provider.provide(&ProviderInput { id: &e.id, image: &e.pair.low, ground_truth: Some(&e.pair.labels) }))
        .collect()
}

fn batch_tensor<'b>(images: impl Iterator<Item = &'b Image>) -> Tensor {
    Tensor::stack(&images.map(Image::to_tensor).collect::<Vec<_>>()).expect("uniform image dims")
}

fn stack3(parts: Vec<Tensor>) -> Tensor {
    let batched: Vec<Tensor> = parts
        .into_iter()
        .map(|t| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshaped(&s).expect("reshape")
        })
        .collect();
    Tensor::stack(&batched).expect("uniform shapes")
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let train_idx: Vec<usize> = (0..dataset.entries.len()).filter(|&i| dataset.entries[i].split == Split::Train).collect();
        if train_idx.is_empty() {
            return Err(Error::Input("dataset has no training pairs".into()));
        }
        let mut val_idx: Vec<usize> = (0..dataset.entries.len()).filter(|&i| dataset.entries[i].split == Split::Val).collect();
        if cfg.val_limit > 0 {
            val_idx.truncate(cfg.val_limit);
        }
        let provider = build_provider(&cfg, dataset_class_count(dataset))?;
        let provider_digest = provider.param_digest();
        let priors = compute_priors(provider.as_ref(), dataset)?;
        let real_logits = if cfg.use_sa {
            dataset
                .entries
                .iter()
                .map(|e| {
                    let id = format!("{}.normal", e.id);
                    let p = provider.provide(&ProviderInput { id: &id, image: &e.pair.normal, ground_truth: Some(&e.pair.labels) })?;
                    Ok(Some(p.logits))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; dataset.entries.len()]
        };
        let mut init = ChaCha8Rng::seed_from_u64(cfg.master_seed);
        let (g_seed, d_seed) = (init.next_u64(), init.next_u64());
        let mut g_store = ParamStore::new();
        let net = Enhancer::new(&mut g_store, cfg.enhancer(), g_seed);
        let g_adam = Adam::new(&g_store, cfg.lr_g, cfg.beta1, cfg.beta2);
        let adv = cfg.use_sa.then(|| {
            let classes = priors[0].class_count();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(d_seed);
            let local = Discriminator::new(&mut store, &mut rng, "local", 3, cfg.disc_width);
            let global = Discriminator::new(&mut store, &mut rng, "global", 3 + classes, cfg.disc_width);
            let adam = Adam::new(&store, cfg.lr_d, cfg.beta1, cfg.beta2);
            Adversaries { store, local, global, adam }
        });
        Ok(Self {
            plans: vec![None; dataset.entries.len()],
            cfg,
            dataset,
            train_idx,
            val_idx,
            provider,
            provider_digest,
            priors,
            real_logits,
            net,
            g_store,
            g_adam,
            adv,
            step: 0,
            best_psnr: f64::NEG_INFINITY,
            best_step: 0,
            log: Vec::new(),
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sch: if self.cfg.use_sch { self.cfg.lambda_sch } else { 0.0 },
            lambda_sa: if self.cfg.use_sa { self.cfg.lambda_sa } else { 0.0 },
        }
    }

    pub fn priors(&self) -> &[SemanticPrior] {
        &self.priors
    }

    pub fn provider_digest(&self) -> [u8; 32] {
        self.provider_digest
    }

    pub fn discriminator_store(&self) -> Option<&ParamStore> {
        self.adv.as_ref().map(|a| &a.store)
    }

    fn plans_for(&mut self, i: usize) -> Result<&[PatchPlan]> {
        if self.plans[i].is_none() {
            let labels = &self.priors[i].labels;
            let plans = match plan_fake_patches(labels, self.cfg.patch_size, self.cfg.erosion_radius) {
                Ok(p) => p,
                Err(Error::NoCandidates) => Vec::new(),
                Err(e) => return Err(e),
            };
            self.plans[i] = Some(plans);
        }
        Ok(self.plans[i].as_deref().expect("just filled"))
    }

    /// One D step followed by one G step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let s = self.step + 1;
        let mut rng = step_rng(self.cfg.master_seed, s);
        let batch: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.train_idx[rng.random_range(0..self.train_idx.len())]).collect();
        let entries = &self.dataset.entries;
        let low = batch_tensor(batch.iter().map(|&i| &entries[i].pair.low));
        let normal = batch_tensor(batch.iter().map(|&i| &entries[i].pair.normal));
        let batch_priors: Vec<SemanticPrior> = batch.iter().map(|&i| self.priors[i].clone()).collect();

        let mut g = Graph::new();
        let pg = self.g_store.bind(&mut g, true);
        let x = g.constant(low);
        let feats = self.net.has_se().then(|| semantic_vars(&mut g, &batch_priors));
        let out = self.net.forward(&mut g, &pg, x, feats.as_ref(), true)?;
        let recon = match self.cfg.recon_loss {
            ReconLoss::L1 => g.l1_to(out, normal.clone()),
            ReconLoss::Mse => g.mse_to(out, normal.clone()),
        };
        let w = self.weights();
        let mut total = recon;

        let mut sch = 0.0;
        if self.cfg.use_sch {
            let n = batch.len() as f64;
            let out_val = g.value(out).clone();
            let mut grad = Vec::with_capacity(out_val.len());
            for (k, &i) in batch.iter().enumerate() {
                let enhanced = Image::from_tensor(&out_val.batch_item(k))?;
                let l = sch_loss_with_grad(&enhanced, &entries[i].pair.normal, &batch_priors[k].labels, self.cfg.alpha, self.cfg.erosion_radius)?;
                sch += l.value / n;
                grad.extend(l.grad.iter().map(|v| v / n));
            }
            let term = g.external_scalar(out, sch, Tensor::new(out_val.shape().to_vec(), grad)?);
            let term = g.scale(term, w.lambda_sch);
            total = g.add(total, term);
        }

        let (mut sa, mut disc, mut worst) = (0.0, 0.0, Vec::new());
        if self.adv.is_some() {
            let mut plans = Vec::with_capacity(batch.len());
            for &i in &batch {
                plans.push(self.plans_for(i)?.to_vec());
            }
            let mut crops = Vec::new();
            for (k, &i) in batch.iter().enumerate() {
                for _ in 0..plans[k].len() {
                    crops.push(random_real_crop(&entries[i].pair.normal, self.cfg.patch_size, &mut rng)?.pixels);
                }
            }
            let real_crops = (!crops.is_empty()).then(|| stack3(crops));
            let logits_fake = Tensor::stack(&batch_priors.iter().map(SemanticPrior::logits_batched).collect::<Vec<_>>())?;
            let logits_real = stack3(batch.iter().map(|&i| self.real_logits[i].clone().expect("computed with SA on")).collect());
            let labels = self.cfg.gan_labels;
            let adv = self.adv.as_mut().expect("checked");

            // Discriminator step on the detached generator output.
            let mut gd = Graph::new();
            let pd = adv.store.bind(&mut gd, true);
            let fake_img = gd.constant(g.value(out).clone());
            let real_img = gd.constant(normal.clone());
            let (lr, lf) = (gd.constant(logits_real.clone()), gd.constant(logits_fake.clone()));
            let glob = global_adversarial_losses(&mut gd, &adv.global, &pd, real_img, fake_img, lr, lf, labels)?;
            let mut loss_d = glob.loss_d;
            if let Some(rc) = &real_crops {
                let real = gd.constant(rc.clone());
                let cands = fake_candidates(&mut gd, fake_img, &plans)?;
                let local = local_adversarial_losses(&mut gd, &adv.local, &pd, real, &cands, labels)?;
                loss_d = gd.add(loss_d, local.losses.loss_d);
            }
            disc = gd.value(loss_d).item();
            if !disc.is_finite() {
                return Err(Error::NonFinite { component: "discriminator".into(), step: s, value: disc });
            }
            let grads = pd.grads(&gd.backward(loss_d), &adv.store);
            adv.adam.update(&mut adv.store, &grads);

            // Generator side with the updated, frozen discriminators.
            let pdg = adv.store.bind(&mut g, false);
            let real_img = g.constant(normal);
            let (lr, lf) = (g.constant(logits_real), g.constant(logits_fake));
            let glob = global_adversarial_losses(&mut g, &adv.global, &pdg, real_img, out, lr, lf, labels)?;
            let mut local_g = 0.0;
            let mut sa_var = glob.loss_g;
            if let Some(rc) = real_crops {
                let real = g.constant(rc);
                let cands = fake_candidates(&mut g, out, &plans)?;
                let local = local_adversarial_losses(&mut g, &adv.local, &pdg, real, &cands, labels)?;
                local_g = g.value(local.losses.loss_g).item();
                worst = local.targets;
                sa_var = g.add(local.losses.loss_g, sa_var);
            }
            sa = sa_loss(local_g, g.value(glob.loss_g).item());
            let term = g.scale(sa_var, w.lambda_sa);
            total = g.add(total, term);
        }

        let recon_v = g.value(recon).item();
        let expected = total_loss(recon_v, sch, sa, w, s)?;
        let total_v = g.value(total).item();
        if !total_v.is_finite() {
            return Err(Error::NonFinite { component: "total".into(), step: s, value: total_v });
        }
        debug_assert!((expected - total_v).abs() <= 1e-9 * expected.abs().max(1.0));
        let grads = pg.grads(&g.backward(total), &self.g_store);
        self.g_adam.update(&mut self.g_store, &grads);
        self.step = s;
        Ok(StepRecord { step: s, total: total_v, recon: recon_v, sch, sa, disc, worst })
    }

    /// Mean PSNR/SSIM over the configured validation pairs.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let report = evaluate(&self.net, &self.g_store, self.dataset, &self.val_idx, &self.priors)?;
        Ok((report.psnr(), report.ssim()))
    }

    pub fn evaluate_split(&self, split: Split) -> Result<MetricsReport> {
        let idx: Vec<usize> = (0..self.dataset.entries.len()).filter(|&i| self.dataset.entries[i].split == split).collect();
        evaluate(&self.net, &self.g_store, self.dataset, &idx, &self.priors)
    }

    /// Train until `cfg.steps`, validating and checkpointing on schedule.
    pub fn run(&mut self) -> Result<()> {
        let out_dir = self.cfg.out_dir.clone();
        if let Some(dir) = &out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.step < self.cfg.steps {
            let rec = self.train_step()?;
            self.log.push(rec.to_line());
            let s = self.step;
            let last = s == self.cfg.steps;
            if (self.cfg.val_every > 0 && s.is_multiple_of(self.cfg.val_every)) || last {
                if self.provider.param_digest() != self.provider_digest {
                    return Err(Error::Config("semantic provider parameters changed during training".into()));
                }
                if !self.val_idx.is_empty() {
                    let (psnr, ssim) = self.validate()?;
                    self.log.push(format!("val step={s} psnr={psnr:e} ssim={ssim:e}"));
                    if psnr > self.best_psnr {
                        self.best_psnr = psnr;
                        self.best_step = s;
                        if let Some(dir) = &out_dir {
                            self.save_checkpoint(&dir.join("best.ckpt"))?;
                        }
                    }
                }
            }
            if let Some(dir) = &out_dir {
                if (self.cfg.checkpoint_every > 0 && s.is_multiple_of(self.cfg.checkpoint_every)) || last {
                    self.save_checkpoint(&dir.join("last.ckpt"))?;
                    self.write_log(&dir.join("metrics.log"))?;
                }
            }
        }
        Ok(())
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        fs::write(path, self.log_text()).map_err(|e| Error::io(path, e))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut entries = vec![
            ("config".to_string(), bytes_tensor(self.cfg.to_text().as_bytes())),
            ("state".to_string(), Tensor::new(vec![3], vec![self.step as f64, self.best_psnr, self.best_step as f64])?),
            ("provider_digest".to_string(), bytes_tensor(&self.provider_digest)),
            ("log".to_string(), bytes_tensor(self.log_text().as_bytes())),
        ];
        push_store(&mut entries, "g", &self.g_store, &self.g_adam);
        if let Some(adv) = &self.adv {
            push_store(&mut entries, "d", &adv.store, &adv.adam);
        }
        tensor_file::write(path, &entries)
    }

    /// Restore parameters, optimizer moments, step and log from a checkpoint
    /// written by a run with the same architecture.
    pub fn resume_from(&mut self, path: &Path) -> Result<()> {
        let entries = tensor_file::read(path)?;
        let ck = Checkpoint { path, entries: &entries };
        if ck.bytes("provider_digest")? != self.provider_digest {
            return Err(Error::Config(format!("{}: semantic provider differs from the one used in training", path.display())));
        }
        let state = ck.get("state")?;
        let st = state.data();
        if st.len() != 3 {
            return Err(Error::load(path, "state entry must hold 3 values"));
        }
        ck.load_store("g", &mut self.g_store, &mut self.g_adam)?;
        if let Some(adv) = &mut self.adv {
            ck.load_store("d", &mut adv.store, &mut adv.adam)?;
        }
        self.step = st[0] as usize;
        self.best_psnr = st[1];
        self.best_step = st[2] as usize;
        let log = String::from_utf8(ck.bytes("log")?).map_err(|_| Error::load(path, "log is not utf-8"))?;
        self.log = log.lines().map(str::to_string).collect();
        Ok(())
    }
}

/// Enhance the given entries and score them against their references.
pub fn evaluate(net: &Enhancer, store: &ParamStore, dataset: &Dataset, idx: &[usize], priors: &[SemanticPrior]) -> Result<MetricsReport> {
    let per_image = idx
        .iter()
        .map(|&i| {
            let e = &dataset.entries[i];
            let out = net.enhance(store, &e.pair.low, net.has_se().then(|| &priors[i]))?;
            ImageMetrics::compute(e.id.clone(), &out, &e.pair.normal, &e.pair.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { per_image })
}

fn bytes_tensor(b: &[u8]) -> Tensor {
    Tensor::new(vec![b.len()], b.iter().map(|&x| x as f64).collect()).expect("1-d")
}

fn push_store(entries: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, adam: &Adam) {
    entries.push((format!("{prefix}.adam_step"), Tensor::scalar(adam.step as f64)));
    for (k, (name, t)) in store.names().iter().zip(store.tensors()).enumerate() {
        entries.push((format!("{prefix}.param.{name}"), t.clone()));
        entries.push((format!("{prefix}.adam_m.{name}"), adam.m[k].clone()));
        entries.push((format!("{prefix}.adam_v.{name}"), adam.v[k].clone()));
    }
}

struct Checkpoint<'c> {
    path: &'c Path,
    entries: &'c [(String, Tensor)],
}

impl Checkpoint<'_> {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::load(self.path, format!("missing entry {name}")))
    }

    fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.get(name)?
            .data()
            .iter()
            .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { Err(Error::load(self.path, format!("{name}: not a byte array"))) })
            .collect()
    }

    fn load_into(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = self.get(name)?;
        if src.shape() != dst.shape() {
            return Err(Error::load(self.path, format!("{name}: shape {:?}, expected {:?}", src.shape(), dst.shape())));
        }
        *dst = src.clone();
        Ok(())
    }

    fn load_store(&self, prefix: &str, store: &mut ParamStore, adam: &mut Adam) -> Result<()> {
        adam.step = self.get(&format!("{prefix}.adam_step"))?.item() as u64;
        let names = store.names().to_vec();
        for (k, name) in names.iter().enumerate() {
            self.load_into(&format!("{prefix}.param.{name}"), &mut store.tensors_mut()[k])?;
            self.load_into(&format!("{prefix}.adam_m.{name}"), &mut adam.m[k])?;
            self.load_into(&format!("{prefix}.adam_v.{name}"), &mut adam.v[k])?;
        }
        Ok(())
    }
}

/// Generator for inference, rebuilt from a checkpoint's config echo.
pub struct LoadedGenerator {
    pub config: TrainConfig,
    pub net: Enhancer,
    pub store: ParamStore,
}

pub fn load_generator(path: &Path) -> Result<LoadedGenerator> {
    let entries = tensor_file::read(path)?;
    let ck = Checkpoint { path, entries: &entries };
    let text = String::from_utf8(ck.bytes("config")?).map_err(|_| Error::load(path, "config is not utf-8"))?;
    let config = TrainConfig::parse(&text)?;
    let mut store = ParamStore::new();
    let net = Enhancer::new(&mut store, config.enhancer(), 0);
    let names = store.names().to_vec();
    for (k, name) in names.iter().enumerate() {
        ck.load_into(&format!("g.param.{name}"), &mut store.tensors_mut()[k])?;
    }
    Ok(LoadedGenerator { config, net, store })
}

/// One ablation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

/// Rows are `baseline`, `all`, `large`, or `+`-joined subsets of
/// `sch`, `sa`, `se`. `large` is a no-SE network widened to the SE
/// network's parameter count.
pub fn parse_rows(spec: &str, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            let mut cfg = TrainConfig { use_se: false, use_sch: false, use_sa: false, ..base.clone() };
            match name {
                "baseline" => {}
                "all" => (cfg.use_se, cfg.use_sch, cfg.use_sa) = (true, true, true),
                "large" => {
                    let se = EnhancerConfig { use_se: true, ..base.enhancer() };
                    cfg.widths = se.parameter_matched_without_se(se.param_count()).widths;
                }
                _ => {
                    for part in name.split('+') {
                        match part {
                            "sch" => cfg.use_sch = true,
                            "sa" => cfg.use_sa = true,
                            "se" => cfg.use_se = true,
                            other => return Err(Error::Config(format!("unknown ablation component {other:?} in row {name:?}"))),
                        }
                    }
                }
            }
            Ok(AblationRow { name: name.to_string(), config: cfg })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    pub params: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub segment_color_error: f64,
}

/// Train every row for every seed and score it on the test split.
pub fn run_ablation(
    dataset: &Dataset,
    rows: &[AblationRow],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for row in rows {
        for &seed in seeds {
            let cfg = TrainConfig { master_seed: seed, out_dir: None, resume: None, ..row.config.clone() };
            let mut t = Trainer::new(cfg, dataset)?;
            t.run()?;
            let report = t.evaluate_split(Split::Test)?;
            let r = AblationResult {
                row: row.name.clone(),
                seed,
                params: t.g_store.num_scalars(),
                psnr: report.psnr(),
                ssim: report.ssim(),
                segment_color_error: report.segment_color_error(),
            };
            progress(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Component checkmarks and seed-mean test metrics, one line per row.
pub fn ablation_table(rows: &[AblationRow], results: &[AblationResult]) -> String {
    let mark = |b: bool| if b { "x" } else { " " };
    let mut out = String::from("| row | SCH | SA | SE | params | PSNR | SSIM | seg color err |\n|---|---|---|---|---|---|---|---|\n");
    for row in rows {
        let rs: Vec<&AblationResult> = results.iter().filter(|r| r.row == row.name).collect();
        if rs.is_empty() {
            continue;
        }
        let n = rs.len() as f64;
        let mean = |f: fn(&AblationResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let c = &row.config;
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.3} | {:.4} | {:.5} |",
            row.name,
            mark(c.use_sch),
            mark(c.use_sa),
            mark(c.use_se),
            rs[0].params,
            mean(|r| r.psnr),
            mean(|r| r.ssim),
            mean(|r| r.segment_color_error)
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::data::SceneConfig;

    fn tiny_dataset() -> Dataset {
        let scene = SceneConfig { height: 32, width: 32, ..Default::default() };
        Dataset::generate(&DatasetConfig { train: 6, val: 2, test: 2, scene, ..Default::default() }).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            widths: [4, 6, 8],
            semantic_widths: [4, 4, 4],
            disc_width: 2,
            patch_size: 16,
            batch_size: 2,
            steps: 4,
            val_every: 2,
            checkpoint_every: 2,
            lambda_sch: 1e-4,
            ..Default::default()
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights { lambda_sch: 0.1, lambda_sa: 0.01 };
        assert!((total_loss(1.0, 0.5, 0.2, w, 1).unwrap() - 1.052).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 9.0, LossWeights { lambda_sch: 0.0, lambda_sa: 0.0 }, 1).unwrap(), 0.7);
        match total_loss(0.1, f64::NAN, 0.0, w, 17) {
            Err(Error::NonFinite { component, step, .. }) => assert_eq!((component.as_str(), step), ("sch", 17)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn runs_are_deterministic_and_resume_exactly() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(TrainConfig { out_dir: Some(dir.path().join("a")), ..tiny_cfg() }, &ds).unwrap();
        a.run().unwrap();
        let mut b = Trainer::new(tiny_cfg(), &ds).unwrap();
        b.run().unwrap();
        assert_eq!(a.log_text(), b.log_text());
        assert!(a.log.iter().any(|l| l.starts_with("val ")));

        // Resume from the step-2 checkpoint of a run cut short.
        let mut c = Trainer::new(TrainConfig { out_dir: Some(dir.path().join("c")), steps: 2, ..tiny_cfg() }, &ds).unwrap();
        c.run().unwrap();
        let mut d = Trainer::new(tiny_cfg(), &ds).unwrap();
        d.resume_from(&dir.path().join("c/last.ckpt")).unwrap();
        assert_eq!(d.step, 2);
        d.run().unwrap();
        // The cut-short run validated at its final step 2, as does the full run.
        assert_eq!(d.log_text(), a.log_text());
        assert_eq!(d.g_store.digest(), a.g_store.digest());
    }

    #[test]
    fn zero_weights_match_the_baseline_trajectory() {
        let ds = tiny_dataset();
        let base = TrainConfig { use_sch: false, use_sa: false, ..tiny_cfg() };
        let zero = TrainConfig { lambda_sch: 0.0, lambda_sa: 0.0, ..tiny_cfg() };
        let mut a = Trainer::new(base, &ds).unwrap();
        let mut b = Trainer::new(zero, &ds).unwrap();
        for _ in 0..3 {
            let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
            assert_eq!(ra.recon, rb.recon);
            assert_eq!(rb.total, rb.recon);
        }
        assert_eq!(a.g_store.digest(), b.g_store.digest());
    }

    #[test]
    fn step_zero_terms_do_not_depend_on_other_toggles() {
        let ds = tiny_dataset();
        let first = |cfg: TrainConfig| Trainer::new(cfg, &ds).unwrap().train_step().unwrap();
        let all = first(tiny_cfg());
        let no_sa = first(TrainConfig { use_sa: false, ..tiny_cfg() });
        let no_sch = first(TrainConfig { use_sch: false, ..tiny_cfg() });
        assert_eq!(all.recon, no_sa.recon);
        assert_eq!(all.sch, no_sa.sch);
        assert_eq!(all.sa, no_sch.sa);
        assert_eq!(no_sch.sch, 0.0);
        // Doubling lambda_sch doubles exactly the SCH contribution.
        let doubled = first(TrainConfig { lambda_sch: 2e-4, ..tiny_cfg() });
        let contrib = |r: &StepRecord, l: f64| r.total - r.recon - 0.01 * r.sa - l * r.sch;
        assert!(contrib(&all, 1e-4).abs() < 1e-12 && contrib(&doubled, 2e-4).abs() < 1e-12);
        assert_eq!(doubled.sch, all.sch);
    }

    #[test]
    fn disabled_components_allocate_nothing() {
        let ds = tiny_dataset();
        let t = Trainer::new(TrainConfig { use_se: false, use_sa: false, ..tiny_cfg() }, &ds).unwrap();
        assert!(t.discriminator_store().is_none());
        assert!(t.g_store.names().iter().all(|n| !n.starts_with("se.")));
    }

    #[test]
    fn discriminator_step_leaves_generator_alone_and_vice_versa() {
        let ds = tiny_dataset();
        let mut t = Trainer::new(tiny_cfg(), &ds).unwrap();
        let d_before = t.discriminator_store().unwrap().digest();
        let d_names = t.discriminator_store().unwrap().names().to_vec();
        assert!(d_names.iter().all(|n| !t.g_store.names().contains(n)));
        t.train_step().unwrap();
        assert_ne!(t.discriminator_store().unwrap().digest(), d_before);
    }

    #[test]
    fn missing_training_split_is_an_input_error() {
        let ds = Dataset::default();
        assert!(matches!(Trainer::new(tiny_cfg(), &ds), Err(Error::Input(_))));
    }

    #[test]
    fn generator_reloads_from_checkpoint() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(TrainConfig { out_dir: Some(dir.path().into()), steps: 2, ..tiny_cfg() }, &ds).unwrap();
        t.run().unwrap();
        let g = load_generator(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(g.store.digest(), t.g_store.digest());
        let e = &ds.entries[0];
        assert_eq!(
            g.net.enhance(&g.store, &e.pair.low, Some(&t.priors()[0])).unwrap(),
            t.net.enhance(&t.g_store, &e.pair.low, Some(&t.priors()[0])).unwrap()
        );
    }

    #[test]
    fn ablation_rows() {
        let rows = parse_rows("baseline,sch,se,sch+se,all,large", &TrainConfig::default()).unwrap();
        assert_eq!(rows.len(), 5 + 1);
        assert!(!rows[0].config.use_se && !rows[0].config.use_sch && !rows[0].config.use_sa);
        assert!(rows[3].config.use_se && rows[3].config.use_sch && !rows[3].config.use_sa);
        let large = &rows[5].config;
        let se = EnhancerConfig { use_se: true, ..TrainConfig::default().enhancer() };
        let gap = large.enhancer().param_count().abs_diff(se.param_count()) as f64 / se.param_count() as f64;
        assert!(!large.use_se && gap <= 0.05);
        assert!(matches!(parse_rows("sch+xyz", &TrainConfig::default()), Err(Error::Config(_))));
    }
}
