use servib::datagen::{generate_corpus, CorpusSpec};
use servib::model::{ModelConfig, SerModel};
use servib::trainer::{train, Phase, TrainConfig};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn stage1_loss_drops_over_two_cycles() {
    let corpus = generate_corpus(&CorpusSpec { n_utterances: 200, seed: 11, ..CorpusSpec::default() }).unwrap();
    // the default learning rates are sized for a pretrained decoder; a toy one needs larger steps
    let config = TrainConfig { cycles: 2, stage1_lr: 5e-3, stage2_peak_lr: 5e-3, seed: 11, ..TrainConfig::default() };
    let model = SerModel::for_corpus(ModelConfig::default(), &corpus, config.seed).unwrap();
    let outcome = train(&config, model, &corpus).unwrap();

    let stage1: Vec<f64> = outcome.log.iter().filter(|r| r.stage == Phase::ContentAsr).map(|r| r.loss).collect();
    // the final value is averaged over the last epoch of batches to keep single-batch noise out
    let epoch = corpus.len().div_ceil(config.batch_size);
    assert!(stage1.len() >= 2 * epoch);
    let first = stage1[0];
    let last = mean(&stage1[stage1.len() - epoch..]);
    assert!(last < 0.8 * first, "stage-1 loss {first:.4} -> {last:.4}");
}
