use flowreg::check::param_grad_check;
use flowreg::flow::{FlowConfig, FlowModel};
use flowreg::nn::{build_patchgan_with, build_regnet_with, LayerStack, ParamStore};
use flowreg::objectives::*;
use flowreg::tensor::{directional_grad_check, Graph, Tensor};

use super::{random_flow, uniform};

pub const SIZE: usize = 32;

/// Flows, discriminators, regnets and two slice triplets for objective tests.
#[derive(Clone)]
pub struct Bench {
    pub gx: FlowModel<f64>,
    pub gy: FlowModel<f64>,
    pub dx: LayerStack<f64>,
    pub dy: LayerStack<f64>,
    pub rx: LayerStack<f64>,
    pub ry: LayerStack<f64>,
    pub a: [Tensor<f64>; 3],
    pub b: [Tensor<f64>; 3],
}

pub fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = super::rng(seed);
    store.map_values(|_, v| {
        let noise = Tensor::<f64>::randn(v.shape().to_vec(), std, &mut rng);
        v.add_assign(&noise).unwrap();
    });
}

/// Sum of three Gaussian blobs on a `-1` background, moved `dx` pixels right.
pub fn smooth_slice(n: usize, seed: u64, dx: f64) -> Tensor<f64> {
    let u = uniform(&[9], 0.0, 1.0, seed).into_data();
    let nf = n as f64;
    Tensor::from_fn(vec![1, 1, n, n], |i| {
        let (x, y) = ((i % n) as f64, (i / n) as f64);
        let mut v = -1.0;
        for k in 0..3 {
            let cx = nf / 4.0 + nf / 2.0 * u[3 * k];
            let cy = nf / 4.0 + nf / 2.0 * u[3 * k + 1];
            let r = nf / 8.0 + nf / 8.0 * u[3 * k + 2];
            v += 0.8 * (-((x - cx - dx).powi(2) + (y - cy).powi(2)) / (r * r)).exp();
        }
        v
    })
}

fn smooth_triplet(n: usize, seed: u64) -> [Tensor<f64>; 3] {
    [smooth_slice(n, seed, -1.0), smooth_slice(n, seed, 0.0), smooth_slice(n, seed, 1.0)]
}

/// Sets the regnet output bias so fields sit between sampling grid lines,
/// where bilinear warping is differentiable.
fn offset_field(net: &mut LayerStack<f64>) {
    let last = net.params().names().iter().rposition(|n| n.ends_with(".bias")).unwrap();
    net.params_mut().values_mut()[last] = Tensor::new(vec![2], vec![0.37, -0.29]).unwrap();
}

impl Bench {
    pub fn new(seed: u64) -> Self {
        let triplet = |s: u64| -> [Tensor<f64>; 3] { std::array::from_fn(|i| uniform(&[1, 1, SIZE, SIZE], -1.0, 1.0, s * 10 + i as u64)) };
        let mut rx = build_regnet_with("rx", 1, 4, seed + 5).unwrap();
        let mut ry = build_regnet_with("ry", 1, 4, seed + 6).unwrap();
        jitter(rx.params_mut(), seed + 7, 0.05);
        jitter(ry.params_mut(), seed + 8, 0.05);
        Bench {
            gx: random_flow("gx", seed + 1, 0.05),
            gy: random_flow("gy", seed + 2, 0.05),
            dx: build_patchgan_with("dx", 1, 4, seed + 3).unwrap(),
            dy: build_patchgan_with("dy", 1, 4, seed + 4).unwrap(),
            rx,
            ry,
            a: triplet(2 * seed + 100),
            b: triplet(2 * seed + 101),
        }
    }

    /// Identity flows, untrained nets and three copies of `slices` per domain.
    pub fn identity(slices: Tensor<f64>) -> Self {
        let same = || [slices.clone(), slices.clone(), slices.clone()];
        let cfg = FlowConfig { hidden: 8, ..Default::default() };
        Bench {
            gx: FlowModel::new("gx", cfg.clone(), 1).unwrap(),
            gy: FlowModel::new("gy", cfg, 2).unwrap(),
            dx: build_patchgan_with("dx", 1, 4, 3).unwrap(),
            dy: build_patchgan_with("dy", 1, 4, 4).unwrap(),
            rx: build_regnet_with("rx", 1, 4, 5).unwrap(),
            ry: build_regnet_with("ry", 1, 4, 6).unwrap(),
            a: same(),
            b: same(),
        }
    }

    /// Tiny smooth fixture for gradient checks: `n x n` blob slices shifted by
    /// one pixel, weights at unit-ish scale so activations stay clear of kinks.
    pub fn smooth(seed: u64, n: usize) -> Self {
        let cfg = FlowConfig { hidden: 4, ..Default::default() };
        let mut nets: Vec<LayerStack<f64>> = vec![
            build_patchgan_with("dx", 1, 2, seed + 3).unwrap(),
            build_patchgan_with("dy", 1, 2, seed + 4).unwrap(),
            build_regnet_with("rx", 1, 2, seed + 5).unwrap(),
            build_regnet_with("ry", 1, 2, seed + 6).unwrap(),
        ];
        for (i, net) in nets.iter_mut().enumerate() {
            jitter(net.params_mut(), seed + 10 + i as u64, 0.3);
        }
        offset_field(&mut nets[2]);
        offset_field(&mut nets[3]);
        let [dx, dy, rx, ry] = <[LayerStack<f64>; 4]>::try_from(nets).ok().unwrap();
        Bench {
            gx: FlowModel::random("gx", cfg.clone(), seed + 1, 0.2).unwrap(),
            gy: FlowModel::random("gy", cfg, seed + 2, 0.2).unwrap(),
            dx,
            dy,
            rx,
            ry,
            a: smooth_triplet(n, 2 * seed + 100),
            b: smooth_triplet(n, 2 * seed + 101),
        }
    }

    /// Registration and generator reports; with `train` set, also the
    /// gradients of the generator total for `gx` and `gy`.
    pub fn run(&self, w: &LossWeights, train: bool) -> (LossReport, LossReport, Option<[Vec<Tensor<f64>>; 2]>) {
        let g = Graph::<f64>::new();
        let (bgx, bgy) = (self.gx.params().bind(&g, train), self.gy.params().bind(&g, train));
        let (bdx, bdy) = (self.dx.params().bind(&g, false), self.dy.params().bind(&g, false));
        let (brx, bry) = (self.rx.params().bind(&g, false), self.ry.params().bind(&g, false));
        let d = Discriminators {
            dx: Net::new(&self.dx, &bdx),
            dy: Net::new(&self.dy, &bdy),
        };
        let pair = FlowPair {
            gx: Net::new(&self.gx, &bgx),
            gy: Net::new(&self.gy, &bgy),
        };
        let vars = |t: &[Tensor<f64>; 3]| TripletVars {
            prev: g.constant(t[0].clone()),
            center: g.constant(t[1].clone()),
            next: g.constant(t[2].clone()),
        };
        let (tx, ty) = (vars(&self.a), vars(&self.b));
        let (reg, fx, fy) = registration_objective(&tx, &ty, Net::new(&self.rx, &brx), Net::new(&self.ry, &bry), w).unwrap();
        let (gen, _) = flowreg_objective(&tx, &ty, &fx, &fy, &pair, &d, w).unwrap();
        let reports = (reg.report().unwrap(), gen.report().unwrap());
        if !train {
            return (reports.0, reports.1, None);
        }
        g.backward(gen.total().unwrap()).unwrap();
        let grads = [self.gx.params().grads(&bgx), self.gy.params().grads(&bgy)];
        (reports.0, reports.1, Some(grads))
    }

    pub fn alignflow(&self, w: &LossWeights) -> LossReport {
        let g = Graph::<f64>::new();
        let (bgx, bgy) = (self.gx.params().bind(&g, false), self.gy.params().bind(&g, false));
        let (bdx, bdy) = (self.dx.params().bind(&g, false), self.dy.params().bind(&g, false));
        let d = Discriminators {
            dx: Net::new(&self.dx, &bdx),
            dy: Net::new(&self.dy, &bdy),
        };
        let pair = FlowPair {
            gx: Net::new(&self.gx, &bgx),
            gy: Net::new(&self.gy, &bgy),
        };
        let x = g.constant(self.a[1].clone());
        let y = g.constant(self.b[1].clone());
        alignflow_objective(x, y, &pair, &d, w).unwrap().0.report().unwrap()
    }

    /// Per-coordinate gradient check of the registration objective with
    /// respect to every parameter of `rx`.
    pub fn registration_gradcheck(&self) -> f64 {
        let w = LossWeights::default();
        param_grad_check(self.rx.params(), |store, want| {
            let mut rx = self.rx.clone();
            *rx.params_mut() = store.clone();
            let g = Graph::<f64>::new();
            let (brx, bry) = (rx.params().bind(&g, want), self.ry.params().bind(&g, false));
            let vars = |t: &[Tensor<f64>; 3]| TripletVars {
                prev: g.constant(t[0].clone()),
                center: g.constant(t[1].clone()),
                next: g.constant(t[2].clone()),
            };
            let (obj, _, _) = registration_objective(&vars(&self.a), &vars(&self.b), Net::new(&rx, &brx), Net::new(&self.ry, &bry), &w)?;
            let total = obj.total()?;
            let v = total.item()?;
            if !want {
                return Ok((v, None));
            }
            g.backward(total)?;
            Ok((v, Some(rx.params().grads(&brx))))
        })
        .unwrap()
    }

    /// Directional gradient check of the generator objective over all flow
    /// parameters of both domains.
    pub fn generator_gradcheck(&self, directions: usize, seed: u64) -> f64 {
        let w = LossWeights::default();
        let xs = [self.gx.params().values().to_vec(), self.gy.params().values().to_vec()].concat();
        let split = self.gx.params().len();
        directional_grad_check(
            |xs: &[Tensor<f64>], want| {
                let mut b = self.clone();
                b.gx.params_mut().values_mut().clone_from_slice(&xs[..split]);
                b.gy.params_mut().values_mut().clone_from_slice(&xs[split..]);
                let (_, gen, grads) = b.run(&w, want);
                Ok((gen.total, grads.map(|[gx, gy]| [gx, gy].concat())))
            },
            &xs,
            directions,
            1e-6,
            seed,
        )
        .unwrap()
    }
}
