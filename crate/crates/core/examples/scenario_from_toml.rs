//! Drive a scenario from a TOML string and read the artifacts back.

use crossdiff::harness::{compare_trajectories, load_snapshots, report, run_scenario, RunConfig};

const CONFIG: &str = r#"
config_schema_version = 1
name = "toml_demo"

[problem]
b = [[2.0, 1.0], [1.0, 2.0]]

[problem.initial]
kind = "table"
x = [0.0, 0.5, 1.0]
values = [[1.0, 2.0, 1.0], [0.5, 0.1, 0.5]]

[mesh]
family = "interval"
cells = 20

[scheme]
dt = 5e-3
t_final = 0.1
mobility = "logmean"

[outputs]
snapshot_stride = 1
snapshot_format = "both"
"#;

fn main() {
    let root = std::env::temp_dir().join("crossdiff_toml_demo");
    let run = |cells: usize, sub: &str| {
        let ov = vec![
            ("mesh.cells".to_string(), cells.to_string()),
            (
                "outputs.dir".to_string(),
                format!("{:?}", root.join(sub).display().to_string()),
            ),
        ];
        let cfg = RunConfig::parse(CONFIG, &ov, std::path::Path::new(".")).unwrap();
        run_scenario(&cfg).unwrap()
    };
    let coarse = run(20, "coarse");
    let fine = run(80, "fine");
    println!("{}", report(&coarse.dir).unwrap().0);
    println!(
        "snapshots stored: {}",
        load_snapshots(&coarse.dir).unwrap().len()
    );
    for e in compare_trajectories(&coarse.dir, &fine.dir).unwrap() {
        println!(
            "species {}: L1 {:.3e} L2 {:.3e} (projected L2 {:.3e})",
            e.species, e.l1_u, e.l2_u, e.l2_hat
        );
    }
}
