//! Properties over a corpus of random contractive double-residual blocks.

use ifr_core::blocks::{unrolled_shared_forward, DoubleResidualParams};
use ifr_core::diagnostics::{implicit_gap, spectral_radius, unroll_convergence, SpectralOptions};
use ifr_core::gradcheck::random_block;
use ifr_core::implicit::{ifr_backward, ifr_forward};
use ifr_core::rng::SplitMix64;
use ifr_core::solver::SolverConfig;
use ifr_core::Tensor;

struct Case {
    block: DoubleResidualParams,
    x: Tensor,
    radius: f64,
}

fn tight(budget: usize) -> SolverConfig {
    SolverConfig {
        max_iters: budget,
        rel_tol: 1e-13,
        ..SolverConfig::default()
    }
}

/// Blocks with spectral radius at most 0.9 at their equilibrium.
fn corpus(size: usize) -> Vec<Case> {
    let mut rng = SplitMix64::new(2024);
    let mut out = Vec::new();
    while out.len() < size {
        let block = random_block(8, 1.0, &mut rng).unwrap();
        let mut x = Tensor::zeros(&[8, 6, 6]);
        x.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        let rec = ifr_forward(&block, &x, &tight(100)).unwrap();
        if !rec.converged() {
            continue;
        }
        let radius = spectral_radius(&block, &x, &rec.equilibrium, SpectralOptions::default()).unwrap();
        if radius <= 0.9 {
            out.push(Case { block, x, radius });
        }
    }
    out
}

#[test]
fn forward_root_matches_a_thousand_step_unroll() {
    for (i, c) in corpus(8).iter().enumerate() {
        let rec = ifr_forward(&c.block, &c.x, &tight(100)).unwrap();
        assert!(rec.converged(), "case {i}");
        assert!(rec.fixed_point_residual().unwrap() <= 1e-13, "case {i}");
        let (unrolled, _) = unrolled_shared_forward(&c.block, &c.x, 1000).unwrap();
        let gap = rec.equilibrium.max_abs_diff(&unrolled);
        assert!(gap <= 1e-6, "case {i}: gap {gap:e}");
    }
}

#[test]
fn unroll_trace_decays_at_the_spectral_rate() {
    for (i, c) in corpus(8).iter().enumerate() {
        let bound = (c.radius + 0.05).min(0.95);
        let report = unroll_convergence(&c.block, &c.x, 400).unwrap();
        assert!(!report.diverged(), "case {i}");
        let trace = &report.norm_diff_trace;
        // Tail: the second half of the stretch above round-off.
        let floor = 1e-12 * trace[0];
        let live = trace.iter().take_while(|&&d| d > floor).count();
        let (a, b) = (live / 2, live - 1);
        assert!(b > a + 5, "case {i}: too few live steps ({live})");
        let slope = (trace[b].ln() - trace[a].ln()) / (b - a) as f64;
        assert!(
            slope <= bound.ln() + 0.01,
            "case {i}: slope {slope} vs radius {} bound {bound}",
            c.radius
        );
    }
}

#[test]
fn implicit_gap_does_not_grow_with_budget() {
    for (i, c) in corpus(8).iter().enumerate() {
        let gaps: Vec<f64> = [3, 5, 10, 15, 20]
            .iter()
            .map(|&b| implicit_gap(&c.block, &c.x, &tight(b), 2000).unwrap())
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0], "case {i}: gaps {gaps:?}");
        }
        assert!(gaps[0] > 1e3 * gaps[4].max(1e-15), "case {i}: gaps {gaps:?}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let c = &corpus(1)[0];
    let rec = ifr_forward(&c.block, &c.x, &tight(100)).unwrap();
    let g = ifr_backward(&rec, &Tensor::zeros_like(&c.x), &tight(100)).unwrap();
    assert_eq!(g.input.max_abs(), 0.0);
    assert!(ifr_core::blocks::params_norm(&g.params) == 0.0);
}
