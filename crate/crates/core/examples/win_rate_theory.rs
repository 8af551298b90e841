//! Win-rate difference of the second-largest over the largest compound score.

use sparc::theory::{
    theorem1_m_bounds, theorem2_example_sweep, win_rate_difference_closed_form,
    win_rate_monte_carlo, TheoryParams,
};

fn main() -> sparc::error::Result<()> {
    let rows = theorem2_example_sweep(2..=40)?;
    for nu in [0.05, 0.2] {
        let first = rows
            .iter()
            .find(|r| r.nu == nu && r.delta > 0.0)
            .map(|r| r.m);
        println!("nu = {nu}: Delta first positive at m = {first:?}");
    }
    let p = TheoryParams::worked_example(0.2, 8);
    let closed = win_rate_difference_closed_form(&p)?;
    let mc = win_rate_monte_carlo(&p, 200_000, 1)?;
    println!(
        "m = 8: closed form {closed:.5}, simulated {:.5} +- {:.5}",
        mc.estimate, mc.standard_error
    );
    let b = theorem1_m_bounds(&p)?;
    println!("Delta > 0 guaranteed beyond m = {:.2}", b.max());
    Ok(())
}
