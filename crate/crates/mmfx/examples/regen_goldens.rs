//! Rewrite the committed golden fixtures in place:
//!
//! ```text
//! cargo run -p mmfx --example regen_goldens
//! ```
//!
//! Generation is deterministic, so an unchanged forward pass produces
//! byte-identical files and an empty `git diff`.

fn main() {
    let dir = mmfx::golden::default_dir();
    if let Err(e) = mmfx::golden::write_fixtures(&dir) {
        eprintln!("fixture regeneration failed: {e}");
        std::process::exit(2);
    }
    match mmfx::golden::check_all(&dir) {
        Ok(results) => {
            for (name, worst) in results {
                println!("{name}: worst deviation {worst:e}");
            }
            println!("wrote {}", dir.display());
        }
        Err(e) => {
            eprintln!("fixture self-check failed: {e}");
            std::process::exit(2);
        }
    }
}
