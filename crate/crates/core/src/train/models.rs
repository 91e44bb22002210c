use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::{self, FlowModel};
use crate::nn::{build_baseline_generator_with, build_patchgan_with, build_regnet_with, LayerStack, ParamStore};
use crate::tensor::{Graph, Real, Tensor};
use crate::train::checkpoint::{Checkpoint, CheckpointError};
use crate::train::config::{Mode, TrainConfig};

/// Translation direction: A is domain X, B is domain Y.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    A2B,
    B2A,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A2B" => Ok(Direction::A2B),
            "B2A" => Ok(Direction::B2A),
            _ => Err(Error::invalid(format!("direction must be A2B or B2A, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::A2B => "A2B",
            Direction::B2A => "B2A",
        })
    }
}

#[derive(Clone, Debug)]
pub enum Generators<T> {
    /// `G_X`, `G_Y` into a shared latent space.
    Flows { gx: FlowModel<T>, gy: FlowModel<T> },
    /// One flow mapping X to Y.
    Single(FlowModel<T>),
    /// Feed-forward `G_XY`, `G_YX`.
    Baseline { gxy: LayerStack<T>, gyx: LayerStack<T> },
}

impl<T: Real> Generators<T> {
    pub fn stores(&self) -> Vec<&ParamStore<T>> {
        match self {
            Generators::Flows { gx, gy } => vec![gx.params(), gy.params()],
            Generators::Single(f) => vec![f.params()],
            Generators::Baseline { gxy, gyx } => vec![gxy.params(), gyx.params()],
        }
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        match self {
            Generators::Flows { gx, gy } => vec![gx.params_mut(), gy.params_mut()],
            Generators::Single(f) => vec![f.params_mut()],
            Generators::Baseline { gxy, gyx } => vec![gxy.params_mut(), gyx.params_mut()],
        }
    }

    pub fn flows_mut(&mut self) -> Vec<&mut FlowModel<T>> {
        match self {
            Generators::Flows { gx, gy } => vec![gx, gy],
            Generators::Single(f) => vec![f],
            Generators::Baseline { .. } => Vec::new(),
        }
    }

    /// Translates a `[B, 1, H, W]` batch without recording gradients.
    pub fn translate(&self, x: &Tensor<T>, dir: Direction) -> Result<Tensor<T>> {
        let out = match (self, dir) {
            (Generators::Flows { gx, gy }, Direction::A2B) => flow::translate(gx, gy, x)?,
            (Generators::Flows { gx, gy }, Direction::B2A) => flow::translate(gy, gx, x)?,
            (Generators::Single(f), dir) => {
                let g = Graph::new();
                let b = f.params().bind(&g, false);
                let xv = g.constant(x.clone());
                let y = match dir {
                    Direction::A2B => flow::direct_forward(f, &b, xv)?,
                    Direction::B2A => flow::direct_inverse(f, &b, xv)?,
                };
                (*y.value()).clone()
            }
            (Generators::Baseline { gxy, gyx }, dir) => {
                let net = if dir == Direction::A2B { gxy } else { gyx };
                let g = Graph::new();
                let b = net.params().bind(&g, false);
                let y = net.forward(&b, g.constant(x.clone()))?;
                (*y.value()).clone()
            }
        };
        Ok(out)
    }
}

/// Every network of one training run.
#[derive(Clone, Debug)]
pub struct Models<T> {
    pub gens: Generators<T>,
    pub dx: LayerStack<T>,
    pub dy: LayerStack<T>,
    /// Registration networks of X and Y (flowreg only).
    pub regs: Option<(LayerStack<T>, LayerStack<T>)>,
}

/// Deterministic per-network seed.
fn net_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

impl<T: Real> Models<T> {
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        let s = |tag| net_seed(cfg.seed, tag);
        let gens = match cfg.mode {
            Mode::Flowreg | Mode::Alignflow => Generators::Flows {
                gx: FlowModel::new("gx", cfg.flow.clone(), s(1))?,
                gy: FlowModel::new("gy", cfg.flow.clone(), s(2))?,
            },
            Mode::Cycleflow => Generators::Single(FlowModel::new("f", cfg.flow.clone(), s(1))?),
            Mode::Cyclegan => Generators::Baseline {
                gxy: build_baseline_generator_with("gxy", 1, cfg.generator_width, s(1))?,
                gyx: build_baseline_generator_with("gyx", 1, cfg.generator_width, s(2))?,
            },
        };
        let regs = if cfg.mode == Mode::Flowreg {
            Some((
                build_regnet_with("rx", cfg.regnet_levels, cfg.regnet_width, s(5))?,
                build_regnet_with("ry", cfg.regnet_levels, cfg.regnet_width, s(6))?,
            ))
        } else {
            None
        };
        Ok(Models {
            gens,
            dx: build_patchgan_with("dx", 1, cfg.disc_width, s(3))?,
            dy: build_patchgan_with("dy", 1, cfg.disc_width, s(4))?,
            regs,
        })
    }

    pub fn disc_stores(&self) -> [&ParamStore<T>; 2] {
        [self.dx.params(), self.dy.params()]
    }

    pub fn reg_stores(&self) -> Vec<&ParamStore<T>> {
        self.regs.iter().flat_map(|(a, b)| [a.params(), b.params()]).collect()
    }

    pub fn all_stores(&self) -> Vec<&ParamStore<T>> {
        let mut v = self.gens.stores();
        v.extend(self.disc_stores());
        v.extend(self.reg_stores());
        v
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        for s in self.all_stores() {
            s.save_into(ck);
        }
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<(), CheckpointError> {
        for s in self.gens.stores_mut() {
            s.load_from(ck)?;
        }
        self.dx.params_mut().load_from(ck)?;
        self.dy.params_mut().load_from(ck)?;
        if let Some((a, b)) = self.regs.as_mut() {
            a.params_mut().load_from(ck)?;
            b.params_mut().load_from(ck)?;
        }
        for f in self.gens.flows_mut() {
            f.set_actnorm_ready();
        }
        Ok(())
    }

    /// Combined fingerprint of the generator, discriminator and registration groups.
    pub fn fingerprints(&self) -> [u64; 3] {
        let fold = |stores: Vec<&ParamStore<T>>| stores.iter().fold(0u64, |h, s| h.rotate_left(7) ^ s.fingerprint());
        [
            fold(self.gens.stores()),
            fold(self.disc_stores().to_vec()),
            fold(self.reg_stores()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::PhantomConfig;

    fn cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            disc_width: 4,
            generator_width: 4,
            regnet_width: 4,
            phantom: Some(PhantomConfig { seed: 0, subjects: 1, slices: 3 }),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn parameter_names_are_unique_across_networks() {
        for mode in [Mode::Flowreg, Mode::Alignflow, Mode::Cycleflow, Mode::Cyclegan] {
            let m = Models::<f32>::build(&cfg(mode)).unwrap();
            let mut names: Vec<&String> = m.all_stores().iter().flat_map(|s| s.names()).collect();
            let n = names.len();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n, "{mode:?}");
            assert_eq!(m.regs.is_some(), mode == Mode::Flowreg);
        }
    }

    #[test]
    fn identity_flows_translate_exactly() {
        let m = Models::<f64>::build(&cfg(Mode::Alignflow)).unwrap();
        let x = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f64 * 0.37).sin());
        assert_eq!(m.gens.translate(&x, Direction::A2B).unwrap(), x);
        assert_eq!("b2a".parse::<Direction>().unwrap(), Direction::B2A);
    }

    #[test]
    fn shared_networks_match_between_flow_modes() {
        let a = Models::<f32>::build(&cfg(Mode::Alignflow)).unwrap();
        let b = Models::<f32>::build(&cfg(Mode::Flowreg)).unwrap();
        assert_eq!(a.fingerprints()[..2], b.fingerprints()[..2]);
    }
}
