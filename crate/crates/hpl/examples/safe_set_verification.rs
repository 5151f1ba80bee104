//! Certify the shipped safe sets by sampled forward rollouts, and show how
//! `estimate_safe_set` finds such a set from scratch.
//!
//! Run with: `cargo run --release --example safe_set_verification [family]`

use hpl::envs::{self, EnvFamily};
use hpl::safety::{estimate_safe_set, verify_invariance, GridSpec, SafeSet};

fn main() {
    let family_arg = std::env::args().nth(1).unwrap_or_else(|| "all".to_string());
    let families: Vec<EnvFamily> = match family_arg.as_str() {
        "all" => vec![EnvFamily::Tube, EnvFamily::Track, EnvFamily::Flappy],
        name => vec![EnvFamily::parse(name).expect("unknown family")],
    };

    for family in families {
        println!("== {} ==", family.name());

        // Estimation on one instance: bisect a monotone family of boxes
        // until the largest certifiable one is found.
        let env = envs::generate_task(family, 7, 0);
        match estimate_safe_set(env.as_ref(), &GridSpec { n_samples: 300 }, 300, 11) {
            Ok(set) => {
                println!("estimated bounds on {}:", env.id());
                for (lo, hi) in &set.bounds {
                    println!("  [{lo:9.4}, {hi:9.4}]");
                }
            }
            Err(e) => println!("estimation failed: {e}"),
        }

        // Certification of the pinned bounds across several instances.
        let mut total_violations = 0;
        for index in 0..10 {
            let env = envs::generate_task(family, 7, index);
            let set = SafeSet::shipped(env.as_ref());
            let report = verify_invariance(env.as_ref(), &set, 100, 500, 5 + index);
            total_violations += report.violations.len();
            if let Some(v) = report.violations.first() {
                println!(
                    "  {}: violation sample {} step {} ({:?}) at {:?}",
                    env.id(),
                    v.sample,
                    v.step,
                    v.kind,
                    v.state
                );
            }
        }
        println!(
            "shipped bounds: {} violations over 10 instances x 100 samples x 500 steps",
            total_violations
        );
    }
}
