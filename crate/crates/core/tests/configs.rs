use reachguard::config::{env_to_toml, load_env, RunConfig};
use reachguard::env::EnvSpec;
use std::path::Path;

const SHIPPED: [&str; 6] = ["lane_following", "vehicle_avoidance", "quad2d_fixed", "quad2d_moving", "quad3d", "corridor"];

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_env_files_match_builtins() {
    for name in SHIPPED {
        let path = configs().join("envs").join(format!("{name}.toml"));
        let builtin = EnvSpec::builtin(name).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), env_to_toml(&builtin), "{name}");
        assert_eq!(load_env(&path).unwrap(), builtin);
    }
}

#[test]
fn shipped_run_configs_are_complete() {
    for name in SHIPPED {
        let path = configs().join(format!("{name}.toml"));
        let cfg = RunConfig::load(&path).unwrap();
        let p = path.display().to_string();
        cfg.hyper(&p).unwrap();
        cfg.bab_options(&p).unwrap();
        assert_eq!(load_env(&cfg.env_path(&path)).unwrap().name, name);
    }
}
