use pace_core::eg_solver::{dual_objective, equilibrium_utilities, hindsight_solution, solve_dual, DualProblem, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use pace_core::market::{ItemSequence, MarketInstance, ValuationMatrix};
use pace_core::rng::rng_from_seed;
use rand::Rng;

/// Best point of the full `1e-3` lattice in a 2-agent box.
fn lattice_min_2d(prob_v: &[Vec<f64>], w: &[f64], lo: f64, hi: f64) -> (f64, [f64; 2]) {
    let h = 1e-3;
    let top = ((hi - lo) / h + 1e-9).floor() as usize;
    let mut best = (f64::INFINITY, [0.0; 2]);
    for a in 0..=top {
        let b0 = lo + a as f64 * h;
        for c in 0..=top {
            let b1 = lo + c as f64 * h;
            let market: f64 = w.iter().enumerate().map(|(j, wj)| wj * (b0 * prob_v[0][j]).max(b1 * prob_v[1][j])).sum();
            let f = market - 0.5 * (b0.ln() + b1.ln());
            if f < best.0 {
                best = (f, [b0, b1]);
            }
        }
    }
    best
}

#[test]
fn solver_is_no_worse_than_any_lattice_point() {
    let mut rng = rng_from_seed(4);
    for _ in 0..6 {
        let m = rng.gen_range(1..5);
        let v: Vec<Vec<f64>> = (0..2).map(|_| (0..m).map(|_| rng.gen_range(0.05..1.0)).collect()).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let prob = DualProblem::new(ValuationMatrix::from_rows(v.clone()).unwrap(), w.clone(), 0.25, 2.0).unwrap();
        let sol = solve_dual(&prob, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert!(sol.converged);
        let (grid_val, grid_pt) = lattice_min_2d(&v, &w, 0.25, 2.0);
        let ours = dual_objective(&sol.beta_hat, &prob).unwrap();
        assert!(ours <= grid_val + 1e-12, "{ours} vs lattice {grid_val} at {grid_pt:?}");
        // the residual certifies optimality of the objective value
        assert!(ours - sol.residual <= grid_val);
        assert!(sol.residual <= 10.0 * DEFAULT_TOL);
    }
}

#[test]
fn objective_sits_on_lower_envelope_of_nearby_points() {
    let v = ValuationMatrix::from_rows(vec![vec![1.0, 0.2, 0.5], vec![0.3, 0.9, 0.5], vec![0.6, 0.6, 0.1]]).unwrap();
    let w = vec![0.5, 0.3, 0.2];
    let prob = DualProblem::new(v, w, 1.0 / 6.0, 2.0).unwrap();
    let sol = solve_dual(&prob, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
    let best = dual_objective(&sol.beta_hat, &prob).unwrap();
    let mut rng = rng_from_seed(8);
    for _ in 0..2000 {
        let probe: Vec<f64> =
            sol.beta_hat.iter().map(|b| (b + rng.gen_range(-0.05..0.05)).clamp(1.0 / 6.0, 2.0)).collect();
        assert!(dual_objective(&probe, &prob).unwrap() >= best - sol.residual - 1e-12);
    }
}

#[test]
fn hindsight_utilities_are_feasible() {
    // utilities 1/(n beta) must be achievable by splitting the realized items among top bidders
    let v = ValuationMatrix::from_rows(vec![vec![1.0, 0.0, 0.4], vec![0.5, 1.0, 0.4]]).unwrap();
    let inst = MarketInstance::new(v).unwrap();
    let seq = ItemSequence::new(vec![0, 1, 2, 2, 0, 1, 1, 2]).unwrap();
    let sol = hindsight_solution(&inst, &seq, 1.0, DEFAULT_TOL).unwrap().require_converged().unwrap();
    let u = equilibrium_utilities(&sol, 2);
    let supply: f64 = u.iter().sum();
    // total utility cannot exceed giving each item to its highest valuer
    let freq = [2.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0];
    let best_total: f64 = freq.iter().zip([1.0, 1.0, 0.4]).map(|(f, v)| f * v).sum();
    assert!(supply <= best_total + 1e-6);
    for (b, ui) in sol.beta_hat.iter().zip(&u) {
        assert!((2.0 * b * ui - 1.0).abs() < 1e-12);
    }
}
