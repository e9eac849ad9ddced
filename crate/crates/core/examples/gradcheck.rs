//! Runs the finite-difference suite in double precision and prints one line per check.

use mdl_core::gradsuite;
use mdl_core::tensor::GradCheckOptions;

fn main() -> mdl_core::Result<()> {
    let result = gradsuite::run(&GradCheckOptions::default())?;
    for (name, passed, total) in result.summary() {
        println!("{name:<34} {passed}/{total} shapes");
    }
    println!(
        "max relative error {:.2e}, {:.1} s, {}",
        result.worst(),
        result.seconds,
        if result.passed() { "PASS" } else { "FAIL" }
    );
    Ok(())
}
