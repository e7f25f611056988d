// Scratch probe (deleted before ship).
use caddi::eval::{noise_injection_run, NgramOracle};
use caddi::model::ModelConfig;
use caddi::sampler::{SamplerConfig, SamplerMode};
use caddi::schedule::{KernelKind, MarginalKernel, NoiseSchedule};
use caddi::synthetic::MarkovSource;
use caddi::train::*;

fn main() {
    let src = MarkovSource::cyclic(8, 0.9);
    let corpus = src.sample_corpus(120_000, 1);
    let oracle = NgramOracle::fit(&corpus, 8, 3, 0.1).unwrap();
    let model = ModelConfig::desk_default(9, 6 * 48, 32);
    let base_cfg = TrainConfig {
        model: model.clone(),
        horizon: 16,
        kernel: KernelKind::Absorbing,
        window: 5,
        attention: AttentionKind::BlockCausal,
        compression: Compression::Truncate,
        corruption: CorruptionLevels::Independent,
        weight_mode: WeightMode::Exact,
        seq_len: 48,
        batch_size: 8,
        learning_rate: 3e-3,
        warmup_steps: 60,
        total_steps: 600,
        weight_decay: 0.01,
        seed: 7,
    };
    let caddi = train(&base_cfg, &corpus).unwrap().params;
    let baseline_cfg = TrainConfig {
        window: 1,
        corruption: CorruptionLevels::Cumulative,
        ..base_cfg
    };
    let baseline = train(&baseline_cfg, &corpus).unwrap().params;

    let schedule = NoiseSchedule::linear(16).unwrap();
    let kernel = MarginalKernel::absorbing(8);
    let mut wins = 0;
    let reps = 6u64;
    for seed in 0..20u64 {
        let mut dc = 0.0;
        let mut dm = 0.0;
        for k in 0..reps {
            let mut ccfg = SamplerConfig::new(SamplerMode::Caddi, 48, 16);
            ccfg.window = 5;
            ccfg.seed = seed * 100 + k;
            let (c, i) = noise_injection_run(&caddi, &model, &schedule, &kernel, &ccfg, &oracle, 8, 0.1).unwrap();
            dc += (i.oracle_perplexity.unwrap() - c.oracle_perplexity.unwrap()) / reps as f64;
            let mut mcfg = SamplerConfig::new(SamplerMode::MarkovBaseline, 48, 16);
            mcfg.window = 1;
            mcfg.seed = seed * 100 + k;
            let (c, i) = noise_injection_run(&baseline, &model, &schedule, &kernel, &mcfg, &oracle, 8, 0.1).unwrap();
            dm += (i.oracle_perplexity.unwrap() - c.oracle_perplexity.unwrap()) / reps as f64;
        }
        println!("seed {seed}: Δcaddi {dc:+.2} Δmarkov {dm:+.2} {}", if dc < dm { "WIN" } else { "loss" });
        if dc < dm { wins += 1; }
    }
    println!("wins {wins}/20");

    for n_steps in [4usize, 8, 16] {
        let mut ppls = Vec::new();
        for i in 0..50u64 {
            let mut cfg = SamplerConfig::new(SamplerMode::Caddi, 48, 16);
            cfg.window = 5;
            cfg.n_steps = n_steps;
            cfg.seed = 1000 + i;
            let tr = caddi::sampler::generate(&caddi, &model, &schedule, &kernel, &cfg, None).unwrap();
            ppls.push(caddi::eval::oracle_perplexity(&oracle, &[tr.final_x0]).unwrap());
        }
        ppls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("steps {n_steps}: median ppl {:.3}", 0.5 * (ppls[24] + ppls[25]));
    }
}
