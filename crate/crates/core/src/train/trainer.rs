use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, generate_phantom, sample_triplets, valid_centers, Dataset};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::objectives::{
    alignflow_objective, cyclegan_objective, cycleflow_objective, discriminator_objective, flowreg_objective,
    registration_objective, Discriminators, FlowPair, GeneratorPair, LossReport, Net, Objective, Translations,
    TripletVars,
};
use crate::tensor::{Graph, Real, Tensor};
use crate::train::adam::{adam_step, AdamState};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::{sidecar_path, Mode, TrainConfig};
use crate::train::models::{Direction, Generators, Models};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d: LossReport,
    pub g: LossReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<LossReport>,
}

/// Adam states of one group of parameter stores.
#[derive(Clone, Debug)]
struct GroupState<T> {
    states: Vec<AdamState<T>>,
}

impl<T: Real> GroupState<T> {
    fn new(stores: &[&ParamStore<T>]) -> Self {
        GroupState {
            states: stores.iter().map(|s| AdamState::new(s)).collect(),
        }
    }
}

fn apply<T: Real>(stores: Vec<&mut ParamStore<T>>, grads: Vec<Vec<Tensor<T>>>, group: &mut GroupState<T>, lr: f64) -> Result<()> {
    for ((store, g), st) in stores.into_iter().zip(grads).zip(group.states.iter_mut()) {
        adam_step(store, &g, st, lr)?;
    }
    Ok(())
}

/// Training state: networks, optimizer moments and the step counter.
pub struct Trainer<T> {
    config: TrainConfig,
    data: Dataset,
    models: Models<T>,
    opt_g: GroupState<T>,
    opt_d: GroupState<T>,
    opt_r: GroupState<T>,
    step: u64,
}

/// Checks that the training split is usable and matches the configured size.
fn validate_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    for (name, stacks) in [("train A", &data.train_a), ("train B", &data.train_b)] {
        if stacks.is_empty() {
            return Err(Error::invalid(format!("{name} has no stacks")));
        }
        for s in stacks.iter() {
            if s.len() < 3 {
                return Err(Error::invalid(format!("{name} stack {} has fewer than 3 slices", s.subject)));
            }
            if let Some(img) = s.slices.iter().find(|i| i.height != cfg.image_size || i.width != cfg.image_size) {
                return Err(Error::invalid(format!(
                    "{name} stack {}: slice is {}x{}, expected {}x{}",
                    s.subject, img.height, img.width, cfg.image_size, cfg.image_size
                )));
            }
        }
    }
    Ok(())
}

/// Loads the data a configuration points to.
pub fn load_data(cfg: &TrainConfig) -> Result<Dataset> {
    if let Some(p) = &cfg.phantom {
        return Ok(generate_phantom(p.seed, p.subjects, p.slices, cfg.image_size)?.into());
    }
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("no data source".into()))?;
    data::load_dataset(path, cfg.image_size)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        validate_dataset(&config, &data)?;
        let models = Models::build(&config)?;
        let opt_g = GroupState::new(&models.gens.stores());
        let opt_d = GroupState::new(&models.disc_stores());
        let opt_r = GroupState::new(&models.reg_stores());
        Ok(Trainer {
            config,
            data,
            models,
            opt_g,
            opt_d,
            opt_r,
            step: 0,
        })
    }

    pub fn from_config(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = load_data(&config)?;
        Self::new(config, data)
    }

    /// Restores a run from a checkpoint and its sidecar configuration.
    pub fn resume(checkpoint: &Path, data: Option<Dataset>) -> Result<Self> {
        let config = TrainConfig::load(&sidecar_path(checkpoint))?;
        let data = match data {
            Some(d) => d,
            None => load_data(&config)?,
        };
        let mut t = Self::new(config, data)?;
        t.load_checkpoint(&Checkpoint::load(checkpoint)?)?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn models(&self) -> &Models<T> {
        &self.models
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch.unwrap_or_else(|| {
            let centers = valid_centers(&self.data.train_a).max(valid_centers(&self.data.train_b));
            centers.div_ceil(self.config.batch).max(1)
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.steps_per_epoch()) as u64
    }

    pub fn epoch(&self) -> usize {
        self.step as usize / self.steps_per_epoch()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.models.save_into(&mut ck);
        let groups = [
            (self.models.gens.stores(), &self.opt_g),
            (self.models.disc_stores().to_vec(), &self.opt_d),
            (self.models.reg_stores(), &self.opt_r),
        ];
        for (stores, group) in groups {
            for (s, st) in stores.iter().zip(&group.states) {
                st.save_into(s, &mut ck);
            }
        }
        ck.insert("state.step", &Tensor::<f64>::scalar(self.step as f64));
        ck
    }

    fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        self.models.load_from(ck)?;
        let m = &self.models;
        let groups = [
            (m.gens.stores(), &mut self.opt_g),
            (m.disc_stores().to_vec(), &mut self.opt_d),
            (m.reg_stores(), &mut self.opt_r),
        ];
        for (stores, group) in groups {
            for (s, st) in stores.iter().zip(group.states.iter_mut()) {
                st.load_from(s, ck)?;
            }
        }
        let step: Tensor<f64> = ck.get("state.step")?;
        self.step = step.item()? as u64;
        Ok(())
    }

    /// Writes the checkpoint and its sidecar configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.checkpoint().save(path)?;
        let side = sidecar_path(path);
        fs::write(&side, self.config.to_json()?).map_err(|e| Error::io(&side, e))
    }

    fn init_actnorm(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
        match &mut self.models.gens {
            Generators::Flows { gx, gy } => {
                if !gx.actnorm_ready() {
                    gx.init_actnorm(x)?;
                }
                if !gy.actnorm_ready() {
                    gy.init_actnorm(y)?;
                }
            }
            Generators::Single(f) if !f.actnorm_ready() => f.init_actnorm(x)?,
            _ => {}
        }
        Ok(())
    }

    /// Runs one D -> G -> Reg update and returns its log record.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let cfg = self.config.clone();
        let step = self.step;
        let epoch = self.epoch();
        let lr = cfg.lr_for_epoch(epoch);
        let mut rng = step_rng(cfg.seed, step);
        let ta = sample_triplets(&self.data.train_a, cfg.batch, &mut rng)?;
        let tb = sample_triplets(&self.data.train_b, cfg.batch, &mut rng)?;
        let [xa_prev, xa, xa_next] = data::triplet_tensors::<T>(&ta)?;
        let [yb_prev, yb, yb_next] = data::triplet_tensors::<T>(&tb)?;
        self.init_actnorm(&xa, &yb)?;

        // Registration: fields for the temporal terms and the pending update.
        let mut reg = None;
        if let Some((rx, ry)) = &self.models.regs {
            let g = Graph::new();
            let (bx, by) = (rx.params().bind(&g, true), ry.params().bind(&g, true));
            let c = |t: &Tensor<T>| g.constant(t.clone());
            let tx = TripletVars { prev: c(&xa_prev), center: c(&xa), next: c(&xa_next) };
            let ty = TripletVars { prev: c(&yb_prev), center: c(&yb), next: c(&yb_next) };
            let (obj, fx, fy) = registration_objective(&tx, &ty, Net::new(rx, &bx), Net::new(ry, &by), &cfg.weights)?;
            let report = self.finish(&g, &obj, "reg")?;
            let grads = vec![rx.params().grads(&bx), ry.params().grads(&by)];
            let fields = [fx, fy].map(|f| f.map(|v| (*v.value()).clone()));
            reg = Some((report, grads, fields));
        }

        // Discriminators on real slices and current translations.
        let fake_y = self.models.gens.translate(&xa, Direction::A2B)?;
        let fake_x = self.models.gens.translate(&yb, Direction::B2A)?;
        let before = self.models.fingerprints();
        let d_report = {
            let g = Graph::new();
            let m = &self.models;
            let (bx, by) = (m.dx.params().bind(&g, true), m.dy.params().bind(&g, true));
            let d = Discriminators { dx: Net::new(&m.dx, &bx), dy: Net::new(&m.dy, &by) };
            let fakes = Translations { fake_y: g.constant(fake_y), fake_x: g.constant(fake_x) };
            let obj = discriminator_objective(&d, g.constant(xa.clone()), g.constant(yb.clone()), &fakes)?;
            let report = self.finish(&g, &obj, "d")?;
            let grads = vec![m.dx.params().grads(&bx), m.dy.params().grads(&by)];
            let stores = vec![self.models.dx.params_mut(), self.models.dy.params_mut()];
            apply(stores, grads, &mut self.opt_d, lr)?;
            report
        };
        let after_d = self.models.fingerprints();
        if after_d[0] != before[0] || after_d[2] != before[2] {
            return Err(Error::invalid("discriminator update touched other parameters"));
        }

        // Generators against the updated, frozen discriminators.
        let g_report = {
            let g = Graph::new();
            let m = &self.models;
            let (bdx, bdy) = (m.dx.params().bind(&g, false), m.dy.params().bind(&g, false));
            let d = Discriminators { dx: Net::new(&m.dx, &bdx), dy: Net::new(&m.dy, &bdy) };
            let c = |t: &Tensor<T>| g.constant(t.clone());
            let bounds: Vec<_> = m.gens.stores().iter().map(|s| s.bind(&g, true)).collect();
            let obj: Objective<'_, T> = match (&m.gens, cfg.mode) {
                (Generators::Flows { gx, gy }, Mode::Flowreg) => {
                    let pair = FlowPair { gx: Net::new(gx, &bounds[0]), gy: Net::new(gy, &bounds[1]) };
                    let tx = TripletVars { prev: c(&xa_prev), center: c(&xa), next: c(&xa_next) };
                    let ty = TripletVars { prev: c(&yb_prev), center: c(&yb), next: c(&yb_next) };
                    let (_, _, [fx, fy]) = reg.as_ref().ok_or_else(|| Error::invalid("flowreg needs registration networks"))?;
                    let fx = [c(&fx[0]), c(&fx[1])];
                    let fy = [c(&fy[0]), c(&fy[1])];
                    flowreg_objective(&tx, &ty, &fx, &fy, &pair, &d, &cfg.weights)?.0
                }
                (Generators::Flows { gx, gy }, _) => {
                    let pair = FlowPair { gx: Net::new(gx, &bounds[0]), gy: Net::new(gy, &bounds[1]) };
                    alignflow_objective(c(&xa), c(&yb), &pair, &d, &cfg.weights)?.0
                }
                (Generators::Single(f), _) => cycleflow_objective(c(&xa), c(&yb), Net::new(f, &bounds[0]), &d)?.0,
                (Generators::Baseline { gxy, gyx }, _) => {
                    let pair = GeneratorPair { gxy: Net::new(gxy, &bounds[0]), gyx: Net::new(gyx, &bounds[1]) };
                    cyclegan_objective(c(&xa), c(&yb), &pair, &d, &cfg.weights)?.0
                }
            };
            let report = self.finish(&g, &obj, "g")?;
            let grads: Vec<_> = m.gens.stores().iter().zip(&bounds).map(|(s, b)| s.grads(b)).collect();
            apply(self.models.gens.stores_mut(), grads, &mut self.opt_g, lr)?;
            report
        };
        let after_g = self.models.fingerprints();
        if after_g[1] != after_d[1] || after_g[2] != after_d[2] {
            return Err(Error::invalid("generator update touched other parameters"));
        }

        let reg_report = match (reg, self.models.regs.as_mut()) {
            (Some((report, grads, _)), Some((rx, ry))) => {
                apply(vec![rx.params_mut(), ry.params_mut()], grads, &mut self.opt_r, lr)?;
                Some(report)
            }
            _ => None,
        };

        self.step += 1;
        Ok(StepLog {
            step,
            epoch,
            lr,
            d: d_report,
            g: g_report,
            reg: reg_report,
        })
    }

    /// Backpropagates the total and returns the report, rejecting non-finite values.
    fn finish(&self, g: &Graph<T>, obj: &Objective<'_, T>, phase: &str) -> Result<LossReport> {
        let report = obj.report()?;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite {
                term: format!("{phase}.{term}"),
                step: self.step,
            });
        }
        g.backward(obj.total()?)?;
        Ok(report)
    }

    /// Runs `n` steps, writing one JSON line per step to `log`.
    pub fn run_steps(&mut self, n: u64, log: &mut dyn Write) -> Result<Vec<StepLog>> {
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let rec = self.train_step()?;
            write_log_line(log, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Trains to the configured number of epochs, checkpointing into `config.out`.
    pub fn train(&mut self, log: &mut dyn Write) -> Result<PathBuf> {
        let out = self.config.out.clone();
        let per_epoch = self.steps_per_epoch() as u64;
        while self.step < self.total_steps() {
            let rec = self.train_step()?;
            write_log_line(log, &rec)?;
            let every = self.config.checkpoint_every as u64;
            if every > 0 && self.step % (per_epoch * every) == 0 && self.step < self.total_steps() {
                self.save(&out.join(format!("epoch{:03}.flwr", self.step / per_epoch)))?;
            }
        }
        let last = out.join("final.flwr");
        self.save(&last)?;
        Ok(last)
    }
}

pub fn write_log_line(log: &mut dyn Write, rec: &StepLog) -> Result<()> {
    let line = serde_json::to_string(rec)?;
    writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))
}

/// Trains from a configuration, writing `loss.jsonl` and checkpoints into
/// `config.out`. Returns the final checkpoint path.
pub fn train<T: Real>(config: TrainConfig) -> Result<PathBuf> {
    let mut trainer = Trainer::<T>::from_config(config)?;
    let out = trainer.config().out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("loss.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let ck = trainer.train(&mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::PhantomConfig;

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            image_size: 32,
            disc_width: 4,
            generator_width: 4,
            regnet_width: 4,
            regnet_levels: 1,
            flow: crate::flow::FlowConfig { hidden: 8, ..Default::default() },
            phantom: Some(PhantomConfig { seed: 3, subjects: 1, slices: 4 }),
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn every_mode_takes_finite_steps() {
        for mode in [Mode::Flowreg, Mode::Alignflow, Mode::Cycleflow, Mode::Cyclegan] {
            let mut t = Trainer::<f32>::from_config(tiny(mode)).unwrap();
            let logs = t.run_steps(2, &mut std::io::sink()).unwrap();
            assert_eq!(logs.len(), 2);
            assert_eq!(t.step(), 2);
            assert_eq!(logs[0].reg.is_some(), mode == Mode::Flowreg);
            if mode == Mode::Flowreg {
                assert_eq!(logs[0].g.terms.len(), 8);
            }
        }
    }

    #[test]
    fn bad_data_fails_before_training() {
        let cfg = tiny(Mode::Alignflow);
        let mut data: Dataset = generate_phantom(0, 1, 4, 48).unwrap().into();
        assert!(Trainer::<f32>::new(cfg.clone(), data.clone()).is_err());
        data.train_b.clear();
        assert!(Trainer::<f32>::new(cfg, data).is_err());
    }

    #[test]
    fn checkpoint_restores_state() {
        let mut t = Trainer::<f64>::from_config(tiny(Mode::Flowreg)).unwrap();
        t.run_steps(2, &mut std::io::sink()).unwrap();
        let ck = t.checkpoint();
        let mut fresh = Trainer::<f64>::from_config(tiny(Mode::Flowreg)).unwrap();
        fresh.load_checkpoint(&ck).unwrap();
        assert_eq!(fresh.step(), 2);
        assert_eq!(fresh.models().fingerprints(), t.models().fingerprints());
        assert_eq!(fresh.checkpoint().to_bytes(), ck.to_bytes());
    }
}
