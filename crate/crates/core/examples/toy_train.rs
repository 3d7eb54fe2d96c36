//! Small end-to-end training run on synthetic images.
//!
//! cargo run --release -p mwdcnn-core --example toy_train [iterations]

use std::time::Instant;

use mwdcnn::data::{add_awgn_seeded, synthetic_image, NoiseMode, PatchDataset};
use mwdcnn::metrics::psnr_tensors;
use mwdcnn::training::TrainError;
use mwdcnn::training::{train, IterRecord, LrSchedule, TrainObserver, TrainPlan};
use mwdcnn::{ModelConfig, Mwdcnn};

struct Progress;

impl TrainObserver<f32> for Progress {
    fn on_iteration(&mut self, r: &IterRecord) -> Result<(), TrainError> {
        if r.iter.is_multiple_of(10) {
            println!("iter {:4} epoch {:3} loss {:.5}", r.iter, r.epoch, r.loss);
        }
        Ok(())
    }
}

fn main() {
    let iterations: usize = std::env::args().nth(1).map_or(200, |s| s.parse().expect("iteration count"));
    let sources: Vec<_> = (0..5).map(|i| (format!("synth{i}"), synthetic_image(96, 96, 1, i))).collect();
    let dataset = PatchDataset::new(sources, 40, 48, NoiseMode::Fixed(25.0), 1).unwrap();
    let mut model = Mwdcnn::<f32>::new(ModelConfig::toy(16)).unwrap();
    let plan = TrainPlan {
        batch_size: 16,
        epochs: 1000,
        schedule: LrSchedule::constant(1e-4, 1000),
        max_iterations: Some(iterations),
        ..TrainPlan::default()
    };
    let start = Instant::now();
    let summary = train(&plan, &mut model, &dataset, None, &mut Progress).unwrap();
    let losses: Vec<f64> = summary.records.iter().map(|r| r.loss).collect();
    let k = 20.min(losses.len());
    let first = losses[..k].iter().sum::<f64>() / k as f64;
    let last = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    println!(
        "{} iterations in {:.1?}; first-{k} mean {first:.5}, last-{k} mean {last:.5}, ratio {:.3}",
        losses.len(),
        start.elapsed(),
        last / first
    );

    for i in 0..3 {
        let clean = synthetic_image(64, 64, 1, 100 + i).to_tensor::<f32>();
        let noisy = add_awgn_seeded(&clean, 25.0, 99, i);
        let out = model.denoise(&noisy).unwrap();
        println!(
            "heldout {i}: noisy {:.2} dB, denoised {:.2} dB",
            psnr_tensors(&clean, &noisy).unwrap(),
            psnr_tensors(&clean, &out).unwrap()
        );
    }
}
