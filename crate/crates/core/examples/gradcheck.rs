//! Finite-difference check of every parameter of the full model.

use shasta::nn::GRADCHECK_TOLERANCE;
use shasta::pipeline::run_gradcheck;

fn main() -> shasta::Result<()> {
    let start = std::time::Instant::now();
    let r = run_gradcheck(0, false)?;
    println!(
        "{} parameters, max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e}), {:.1}s",
        r.num_params,
        r.max_rel_error,
        r.worst_index,
        r.analytic,
        r.numeric,
        start.elapsed().as_secs_f64()
    );
    println!("{}", if r.passed(GRADCHECK_TOLERANCE) { "pass" } else { "fail" });
    Ok(())
}
