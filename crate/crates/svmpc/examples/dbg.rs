use svmpc::reachability::*;
use svmpc::scenario::*;

fn main() {
    // Actual CI grid (41x41x41x21), tol 1e-4.
    let scenario = Scenario::dubins_default();
    let t0 = std::time::Instant::now();
    let (v, report) = solve_scenario_safety_value(&scenario, &SolveOptions::default()).unwrap();
    println!("CI-grid report: {:?}", report);
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    let grid = scenario.build_grid().unwrap();
    let l = constraint_field(&scenario, &grid);
    let below = v.values().iter().zip(l.values()).all(|(a, b)| a <= &(b + 1e-12));
    println!("V <= l: {below}");
    let model = scenario.build_model();
    let stepped = vi_step(&model, &v, &l, report.dt).unwrap();
    let drift = stepped.values().iter().zip(v.values()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    println!("fixed point drift vs tol {}: {}", 1e-4, drift);
    let frac_safe = v.values().iter().filter(|x| **x >= 0.0).count() as f64 / v.values().len() as f64;
    println!("fraction of grid safe: {:.3}", frac_safe);
}
