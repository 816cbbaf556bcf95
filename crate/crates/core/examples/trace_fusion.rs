//! Prints the long-video fusion schedule for a timeline.
//! Usage: trace_fusion [l f alpha steps]

use avatar_core::fusion::{plan_segments, FusionConfig};

fn main() -> anyhow::Result<()> {
    let v: Vec<usize> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let cfg = match v.as_slice() {
        [l, f, a, t] => FusionConfig {
            length: *l,
            segment: *f,
            offset: *a,
            steps: *t,
        },
        _ => FusionConfig {
            length: 10,
            segment: 4,
            offset: 2,
            steps: 2,
        },
    };
    let plan = plan_segments(&cfg)?;
    print!("{}", plan.to_csv());
    for k in 0..cfg.steps.min(4) {
        let row: Vec<String> = (0..cfg.length)
            .map(|f| {
                let owner = plan.at_step(k).enumerate().filter(|(_, s)| s.frames(cfg.length).contains(&f)).last();
                owner.map_or("?".into(), |(i, _)| i.to_string())
            })
            .collect();
        println!("step {k} owners: {}", row.join(""));
    }
    Ok(())
}
