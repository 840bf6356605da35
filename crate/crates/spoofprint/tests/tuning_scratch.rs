//! Scratch harness for dialing in the benchmark; not part of the suite.

use spoofprint::bench::{build_benchmark_registry, default_combo, BenchConfig, HELD_OUT_FAMILY};
use spoofprint::embedder::{EncoderParams, FeatureMode};
use spoofprint::metalearn::{
    adapt_and_evaluate, encoder_config_from_params, meta_train, MetaConfig, TrainOptions,
};
use std::time::Instant;

#[test]
#[ignore]
fn tune_benchmark() {
    let t0 = Instant::now();
    let bench_cfg = BenchConfig::default();
    let registry = build_benchmark_registry(&bench_cfg).unwrap();
    println!("registry built in {:?}", t0.elapsed());

    for seed in 0..5u64 {
        let t1 = Instant::now();
        let cfg = spoofprint::bench::bench_meta_config(seed);
        let opts = TrainOptions::default();
        let out = meta_train(&cfg, &registry, &default_combo(), &opts).unwrap();
        let enc_cfg = encoder_config_from_params(&out.params, 32, 31).unwrap();
        let eval = adapt_and_evaluate(
            &cfg, &registry, &out.params, enc_cfg, &opts, HELD_OUT_FAMILY, 5, Some(100),
        )
        .unwrap();

        // random-init baseline with identical adaptation
        let baseline_params = EncoderParams::init(enc_cfg, spoofprint::mix_seed(seed, 0xba5e)).unwrap();
        let base = adapt_and_evaluate(
            &cfg, &registry, &baseline_params.params, enc_cfg, &opts, HELD_OUT_FAMILY, 5, Some(100),
        )
        .unwrap();

        println!(
            "seed {seed}: train {:?} | loss {:.4} .. mid {:.4} .. {:.4} | adapted loss {:.4} acc {:.3} | baseline loss {:.4} acc {:.3}",
            t1.elapsed(),
            out.loss_history.first().unwrap(),
            out.loss_history[out.loss_history.len() / 2],
            out.loss_history.last().unwrap(),
            eval.mean_query_loss,
            eval.accuracy,
            base.mean_query_loss,
            base.accuracy,
        );
    }
    println!("total {:?}", t0.elapsed());
}

#[test]
#[ignore]
fn tune_feature_modes() {
    let bench_cfg = BenchConfig::default();
    let registry = build_benchmark_registry(&bench_cfg).unwrap();
    for seed in 0..5u64 {
        let cfg = spoofprint::bench::bench_meta_config(seed);
        let pre = meta_train(
            &cfg,
            &registry,
            &default_combo(),
            &TrainOptions { feature_mode: FeatureMode::PreOnly, ..TrainOptions::default() },
        )
        .unwrap();
        let prepost = meta_train(&cfg, &registry, &default_combo(), &TrainOptions::default()).unwrap();
        println!(
            "seed {seed}: pre final {:.5} | prepost final {:.5}",
            pre.loss_history.last().unwrap(),
            prepost.loss_history.last().unwrap()
        );
    }
}

#[test]
#[ignore]
fn feature_diagnostics() {
    use spoofprint::sigmodel::Label;
    use spoofprint::tracking::PostCorrField;
    let registry = build_benchmark_registry(&BenchConfig::default()).unwrap();
    for tag in ["fam_a", "fam_b", "fam_c"] {
        let set = registry.get(tag).unwrap();
        for label in [Label::Clean, Label::Spoofed] {
            let idx = set.indices_by_label(label);
            let mut dll = 0.0f64;
            let mut pll = 0.0f64;
            let mut fll = 0.0f64;
            let mut dop_std = 0.0f64;
            let mut spec_tvar = 0.0f64;
            for &i in &idx {
                let it = &set.items[i];
                let pc = it.postcorr.as_ref().unwrap();
                dll += pc.field(PostCorrField::DllDiscr).iter().map(|v| v.abs()).sum::<f64>()
                    / pc.epochs() as f64;
                pll += pc.field(PostCorrField::PllLock).iter().sum::<f64>() / pc.epochs() as f64;
                fll += pc.field(PostCorrField::FllLock).iter().sum::<f64>() / pc.epochs() as f64;
                let d = pc.field(PostCorrField::Doppler);
                let dm = d.iter().sum::<f64>() / d.len() as f64;
                dop_std += (d.iter().map(|v| (v - dm) * (v - dm)).sum::<f64>() / d.len() as f64).sqrt();
                // temporal variance of the spectrogram (mean over rows of row variance)
                let s = &it.spectrogram;
                let mut tv = 0.0;
                for r in 0..s.rows {
                    let row: Vec<f64> = (0..s.cols).map(|c| s.at(r, c)).collect();
                    let m = row.iter().sum::<f64>() / row.len() as f64;
                    tv += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
                }
                spec_tvar += tv / s.rows as f64;
            }
            let n = idx.len() as f64;
            println!(
                "{tag} {:>7}: n {:>3} | |dll| {:.4} | pll {:.4} | fll {:.4} | dop_std {:.2} | spec_tvar {:.4}",
                label.name(), idx.len(), dll / n, pll / n, fll / n, dop_std / n, spec_tvar / n
            );
        }
    }
}
