// dev probe: epochs-to-target for the tiny engine fixture at various lrs.
use lethe_core::corpus::generate_corpus;
use lethe_core::engine::{finetune, TrainConfig};
use lethe_core::model::{ModelConfig, ToyLm};
use std::time::Instant;

fn main() {
    let corpus = generate_corpus(11, 4, 0.5).unwrap();
    let mc = ModelConfig { d_model: 16, n_heads: 2, n_blocks: 2, d_ff: 32, max_seq_len: 160, ..ModelConfig::default() };
    for lr in [3e-3, 5e-3, 8e-3, 1e-2, 2e-2] {
        let mut m = ToyLm::init(mc.clone(), 13).unwrap();
        let cfg = TrainConfig { lr, batch: 6, epoch_cap: 300, target_acc: 0.9, min_acc: 0.5, shuffle_seed: 14 };
        let t = Instant::now();
        match finetune(&mut m, &corpus, &cfg) {
            Ok(log) => {
                let last = log.last().unwrap();
                println!(
                    "lr {:>6}: {} epochs, {:.1}s, loss {:.4}, f_acc {:.3}, r_acc {:.3}",
                    lr, last.epoch, t.elapsed().as_secs_f64(), last.loss,
                    last.forget_acc.unwrap(), last.retain_acc.unwrap()
                );
            }
            Err(e) => println!("lr {:>6}: FAILED after {:.1}s: {}", lr, t.elapsed().as_secs_f64(), e),
        }
    }
}
