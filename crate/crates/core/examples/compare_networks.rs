//! Pairwise significance between three networks on per-fold accuracies,
//! plus the transfer gain and the level/chance-improvement correlation.
use eegbench::stats::*;

fn main() -> eegbench::Result<()> {
    let base = [0.71, 0.64, 0.80, 0.58, 0.75, 0.69, 0.62, 0.77, 0.66, 0.73];
    let nets = [("eegnet", 0.06), ("shallow_convnet", 0.03), ("deep_convnet", -0.04)];
    let samples: Vec<AccuracySample> = nets
        .iter()
        .map(|&(name, shift)| {
            let mut s = AccuracySample::new(name, "toy", Mode::Within);
            for (i, a) in base.iter().enumerate() {
                // small per-fold wobble so the pairs are not exactly shifted copies
                let wobble = 0.01 * ((i * 7 + name.len()) % 5) as f64;
                s.push(format!("s{:02}", i / 5), i % 5, (a + shift + wobble).clamp(0.0, 1.0));
            }
            s
        })
        .collect();

    let m = compare_networks(&samples, &CompareConfig::default())?;
    for p in &m.pairs {
        println!(
            "{:>16} vs {:<16} {:?}  p = {:.5} (adjusted {:.5})  level {}",
            m.networks[p.a], m.networks[p.b], p.test, p.raw_p, p.adjusted_p, p.level
        );
    }
    println!("ranking:");
    for (net, ci) in m.ranking() {
        println!("  {net:<16} chance improvement {ci:.4}");
    }

    println!("transfer gain 0.70 -> 0.76: {:.4}", transfer_gain(0.70, 0.76));
    let r = pearson(&[1.0, 2.0, 3.0, 5.0], &[0.05, 0.11, 0.12, 0.24])?;
    println!("pearson r = {:.4}, p = {:.4}", r.statistic, r.p);
    Ok(())
}
