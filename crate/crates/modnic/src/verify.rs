//! Finite-difference checks of the complete training losses.
//!
//! The per-operation suite lives in the core crate; this module rebuilds the
//! full fixed-rate and variable-rate graphs (analysis, masking, noise,
//! synthesis, rate) around perturbed parameter copies and compares the tape
//! gradients against central differences at seeded coordinates.

use modnic_core::density::{DensityIds, DensityParams};
use modnic_core::math;
use modnic_core::modnet::{ModNetIds, ModNetParams};
use modnic_core::rng;
use modnic_core::tape::Tape;
use modnic_core::tensor::Tensor;
use modnic_core::trainer::{loss_fixed_on, loss_vbr_on, VbrForm};
use modnic_core::transforms::{TransformIds, TransformParams};

/// Deep graphs leave some coordinates with gradients near 1e-6; h = 1e-4
/// keeps cancellation noise well under the 1e-4 bar while quadratic
/// truncation stays negligible.
const FD_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct LossCheck {
    pub name: &'static str,
    pub coords_checked: usize,
    /// Coordinates whose h and h/2 estimates disagreed: the interval
    /// straddles an activation kink, where central differences are invalid.
    pub coords_skipped: usize,
    pub max_rel_err: f64,
}

impl LossCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

#[derive(Clone, Copy)]
enum Graph {
    Fixed { lambda: f64 },
    Vbr { lambda: f64, form: VbrForm },
}

impl Graph {
    fn name(self) -> &'static str {
        match self {
            Graph::Fixed { .. } => "loss_fixed",
            Graph::Vbr { form: VbrForm::Weighted, .. } => "loss_vbr_weighted",
            Graph::Vbr { form: VbrForm::Literal, .. } => "loss_vbr_literal",
        }
    }
}

struct Scene {
    tp: TransformParams,
    dp: DensityParams,
    mp: ModNetParams,
    x: Tensor,
}

impl Scene {
    fn new(seed: u64) -> Self {
        let mut init = rng::substream(seed, 0);
        let mut tp = TransformParams::toy(4, &mut init);
        let mut dp = DensityParams::init(4, &mut init);
        let mut mp = ModNetParams::init(4, 3, &mut init);
        // Fresh init zeroes the biases, which parks every dead patch's
        // pre-activation exactly on the ReLU kink where central differences
        // are invalid at any step size. Jitter moves the whole fixture to a
        // differentiable point, as one training step would.
        let mut jitter = rng::substream(seed, 3);
        for t in tp.params_mut().into_iter().chain(dp.params_mut()).chain(mp.params_mut()) {
            let noise = rng::uniform(&mut jitter, &t.shape().to_vec(), -0.1, 0.1);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        let img = rng::uniform(&mut rng::substream(seed, 1), &[3, 16, 16], 0.05, 0.95);
        let s = img.shape().to_vec();
        let x = Tensor::new(&[1, s[0], s[1], s[2]], img.data().to_vec()).expect("valid image");
        Scene { tp, dp, mp, x }
    }

    fn tensors(&self, graph: Graph) -> Vec<&Tensor> {
        let mut out = self.tp.params();
        out.extend(self.dp.params());
        if matches!(graph, Graph::Vbr { .. }) {
            out.extend(self.mp.params());
        }
        out
    }

    fn tensors_mut(&mut self, graph: Graph) -> Vec<&mut Tensor> {
        let mut out = self.tp.params_mut();
        out.extend(self.dp.params_mut());
        if matches!(graph, Graph::Vbr { .. }) {
            out.extend(self.mp.params_mut());
        }
        out
    }

    /// Loss value and per-tensor gradients; the noise stream is re-seeded on
    /// every call so quantization noise is constant across FD evaluations.
    fn eval(&self, graph: Graph, noise_seed: u64) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let tids = TransformIds::insert(&mut tape, &self.tp, true);
        let dids = DensityIds::insert(&mut tape, &self.dp, true);
        let x = tape.constant(&self.x);
        let mut noise = rng::seeded(noise_seed);
        let (root, leaf_ids) = match graph {
            Graph::Fixed { lambda } => {
                let ids =
                    loss_fixed_on(&mut tape, x, lambda, &self.tp, &tids, &dids, 1.0, &mut noise);
                let mut leaves = tids.ids();
                leaves.extend(dids.ids());
                (ids.loss, leaves)
            }
            Graph::Vbr { lambda, form } => {
                let mids = ModNetIds::insert(&mut tape, &self.mp, true);
                let ids = loss_vbr_on(
                    &mut tape, x, lambda, form, &self.tp, &tids, &dids, &mids, 1.0, &mut noise,
                )
                .expect("batch of one");
                let mut leaves = tids.ids();
                leaves.extend(dids.ids());
                leaves.extend(mids.ids());
                (ids.loss, leaves)
            }
        };
        let grads = tape.backward(root);
        let per_tensor = leaf_ids
            .iter()
            .map(|&id| grads.get(id).expect("trainable leaf").to_vec())
            .collect();
        (tape.scalar(root), per_tensor)
    }
}

fn check_graph(graph: Graph, seed: u64, coords_per_tensor: usize) -> LossCheck {
    let mut scene = Scene::new(seed);
    let noise_seed = seed ^ 0x5eed;
    let (_, analytic) = scene.eval(graph, noise_seed);
    let mut coord_rng = rng::substream(seed, 2);
    let plan: Vec<(usize, usize)> = scene
        .tensors(graph)
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| {
            let n = t.numel();
            let picks = if n <= coords_per_tensor {
                (0..n as u32).collect()
            } else {
                rng::sample_distinct(&mut coord_rng, 0, (n - 1) as u32, coords_per_tensor)
            };
            picks.into_iter().map(move |c| (ti, c as usize)).collect::<Vec<_>>()
        })
        .collect();

    let mut check =
        LossCheck { name: graph.name(), coords_checked: 0, coords_skipped: 0, max_rel_err: 0.0 };
    for (ti, ci) in plan {
        let mut central = |h: f64| {
            let base = scene.tensors(graph)[ti].data()[ci];
            scene.tensors_mut(graph)[ti].data_mut()[ci] = base + h;
            let (up, _) = scene.eval(graph, noise_seed);
            scene.tensors_mut(graph)[ti].data_mut()[ci] = base - h;
            let (down, _) = scene.eval(graph, noise_seed);
            scene.tensors_mut(graph)[ti].data_mut()[ci] = base;
            (up - down) / (2.0 * h)
        };
        let numeric = central(FD_STEP);
        if math::rel_err_with_floor(numeric, central(FD_STEP / 2.0), FD_FLOOR) > 1e-3 {
            check.coords_skipped += 1;
            continue;
        }
        let err = math::rel_err_with_floor(analytic[ti][ci], numeric, FD_FLOOR);
        check.coords_checked += 1;
        check.max_rel_err = check.max_rel_err.max(err);
    }
    check
}

/// FD-check the fixed loss and both VBR forms end to end.
pub fn full_loss_checks(seed: u64, coords_per_tensor: usize) -> Vec<LossCheck> {
    [
        Graph::Fixed { lambda: 16.0 },
        Graph::Vbr { lambda: 16.0, form: VbrForm::Weighted },
        Graph::Vbr { lambda: 3.0, form: VbrForm::Literal },
    ]
    .into_iter()
    .map(|g| check_graph(g, seed, coords_per_tensor))
    .collect()
}

pub fn format_loss_check(check: &LossCheck, tol: f64) -> String {
    let status = if check.passes(tol) { "ok" } else { "FAIL" };
    format!(
        "{:<18} {:>4} coords  max rel err {:.3e}  {}",
        check.name, check.coords_checked, check.max_rel_err, status
    )
}
