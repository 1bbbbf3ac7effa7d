//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances are the constants in `qtherm_cli::checks`.

use qtherm_cli::checks;

fn main() {
    let mut failed = Vec::new();
    for (id, f) in checks::all() {
        match f() {
            Ok(c) => {
                print!("{}", c.details());
                if !c.passed() {
                    failed.push(id);
                }
            }
            Err(e) => {
                println!("criterion {id:>2}: FAIL  error: {e}");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria PASS");
    } else {
        println!("acceptance: FAIL for criteria {failed:?}");
        std::process::exit(1);
    }
}
