use pnl::train::{train_eval, BlockChoice, SynthTask, BATCH, EPOCHS};
use pnl::{CombMode, PairwiseKind, PnlConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn blocks() -> Vec<BlockChoice> {
    vec![
        BlockChoice::None,
        BlockChoice::Nl(PairwiseKind::EmbeddedGaussian),
        BlockChoice::Pnl(PnlConfig::basic(2, PairwiseKind::EmbeddedGaussian, CombMode::VanillaConcat).unwrap()),
    ]
}

#[test]
fn loss_decreases_for_every_block_and_seed() {
    for seed in 0..3 {
        let task = SynthTask::default_with_seed(seed);
        for block in blocks() {
            let m = train_eval(block, &task, EPOCHS, BATCH, seed).unwrap();
            let losses: Vec<f64> = m.per_epoch.iter().map(|e| e.loss).collect();
            let first = median(losses[..5].to_vec());
            let last = median(losses[EPOCHS - 5..].to_vec());
            assert!(last < first, "{block} seed {seed}: {losses:?}");
        }
    }
}

#[test]
fn training_is_reproducible() {
    let task = SynthTask {
        train_size: 64,
        val_size: 16,
        ..SynthTask::default_with_seed(9)
    };
    for block in blocks() {
        let a = train_eval(block, &task, 2, BATCH, 9).unwrap();
        let b = train_eval(block, &task, 2, BATCH, 9).unwrap();
        assert_eq!(a, b, "{block}");
    }
}
