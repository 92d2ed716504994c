//! Trains the tiny configuration on the synthetic shapes set and reports
//! the backbone-feature Fréchet distance as training proceeds.
//!
//! `cargo run --release -p galip-core --example toy_run -- [steps] [eval_every]`

use std::time::Instant;

use galip_core::data::toy::{self, ToyConfig};
use galip_core::data::BatchIter;
use galip_core::evaluation::{feature_stats, frechet_distance, ClipImageFeatures};
use galip_core::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let steps = args.first().copied().unwrap_or(2000);
    let every = args.get(1).copied().unwrap_or(250);
    let data = toy::dataset(ToyConfig::default());
    let cfg = TrainConfig { max_steps: steps, ..TrainConfig::tiny() };
    let mut trainer = Trainer::from_config(cfg)?;
    let mut batches = BatchIter::new(data.len(), trainer.config().effective_batch_size(), 0)?;

    let eval_idx: Vec<usize> = (0..128).map(|i| i * 2).collect();
    let captions: Vec<String> = eval_idx.iter().map(|&i| data.captions[i][0].clone()).collect();
    let eval_text = trainer.embed_captions(&captions)?;
    let bb = trainer.backbone().clone();
    let extractor = ClipImageFeatures::new(&bb);
    let real = feature_stats(&data.stack(&eval_idx), &extractor)?;
    let fid = |t: &Trainer| -> anyhow::Result<f64> {
        let fake = feature_stats(&t.sample(&eval_text, 1234, 32)?, &extractor)?;
        Ok(frechet_distance(&real, &fake)?)
    };
    println!("step 0 fid {:.4}", fid(&trainer)?);
    let start = Instant::now();
    let (mut real_sum, mut fake_sum, mut n) = (0.0, 0.0, 0);
    while trainer.step() < steps {
        let batch = batches.next_batch(&data);
        let text = trainer.embed_captions(&batch.captions)?;
        let m = trainer.train_step(&batch.images, &text)?;
        real_sum += m.real_logit;
        fake_sum += m.fake_logit;
        n += 1;
        if m.step % every == 0 {
            println!(
                "step {} fid {:.4} real {:.3} fake {:.3} ld {:.3} lg {:.3} sim {:.3} gn {:.3} ({:.2}s/step)",
                m.step,
                fid(&trainer)?,
                real_sum / n as f64,
                fake_sum / n as f64,
                m.loss_d,
                m.loss_g,
                m.similarity,
                m.grad_norm,
                start.elapsed().as_secs_f64() / m.step as f64
            );
            (real_sum, fake_sum, n) = (0.0, 0.0, 0);
        }
    }
    Ok(())
}
