//! Runs a harness scenario from an inline config against a throwaway cache,
//! twice, to show the cache hit on the second run.

use nonlocal_calderon::harness::cache::MatrixCache;
use nonlocal_calderon::harness::config::ExperimentConfig;
use nonlocal_calderon::harness::scenarios::run_scenario;

fn main() -> nonlocal_calderon::Result<()> {
    let cfg = ExperimentConfig::parse(
        r#"
scenario = "runge"
seed = 7

[runge]
sizes = [5, 10, 20]
"#,
    )?;
    let root = std::env::temp_dir().join(format!("fdck-example-{}", std::process::id()));
    let cache = MatrixCache::at(root.join("cache"));
    for pass in 0..2 {
        let m = run_scenario(&cfg, &root.join("out"), &cache, 1)?;
        let events: Vec<String> = m.cache.iter().map(|c| format!("{}:{:?}", c.kind, c.event)).collect();
        println!("pass {pass}: all_pass = {}  cache = {events:?}", m.all_pass);
        for a in &m.assertions {
            println!("  {} {} = {:.3e}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.value);
        }
    }
    println!("removed {} cache files", cache.clean()?);
    std::fs::remove_dir_all(&root)?;
    Ok(())
}
