//! Scratch probe for the desk-scale overfit run (exploratory; prints the
//! loss trajectory so the training recipe can be tuned).

use std::path::PathBuf;

use ditfuse_core::imaging::ImageBuf;
use ditfuse_core::m3::{generate_dataset, DataConfig, DegradeConfig, MixWeights};
use ditfuse_core::model::ModelConfig;
use ditfuse_core::train::{run_training_jobs, TrainConfig, TrainerState};

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ditfuse-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn source(phase: usize) -> ImageBuf {
    ImageBuf::from_fn(32, 32, |y, x| {
        let a = ((x * 3 + y * 7 + phase * 13) % 31) as f32 / 31.0;
        let b = ((x + 2 * y + phase * 5) % 17) as f32 / 17.0;
        let c = ((x * x + y + phase) % 13) as f32 / 13.0;
        [a, b, c]
    })
}

#[test]
#[ignore]
fn probe_overfit_trajectory() {
    let dir = tmp_dir("probe");
    let sources: Vec<(String, ImageBuf)> = vec![("s0".to_string(), source(0))];
    let data_cfg = DataConfig {
        mix_weights: MixWeights {
            m3: 1.0,
            seg: 0.0,
            control: 0.0,
            fusion: 0.0,
        },
        grid_sizes: vec![16],
        joint_fraction: 0.25,
        total: 8,
    };
    let manifest =
        generate_dataset(&sources, &data_cfg, &DegradeConfig::default(), 3, &dir).unwrap();

    let model_cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        latent_factor: 2,
        patch: 2,
        lora_rank: 64,
        lora_alpha: 0.5,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        lr: 1e-4,
        batch: 8,
        epochs: 2000,
        cond_dropout: 0.01,
        seed: 11,
    };
    let mut state: TrainerState<f32> = TrainerState::new(&model_cfg, &train_cfg).unwrap();
    let t0 = std::time::Instant::now();
    let log = run_training_jobs(&mut state, &manifest, &dir, None, 1).unwrap();
    let loss0 = log[0].1;
    let mut best = f64::INFINITY;
    for (step, loss, _) in &log {
        best = best.min(*loss);
        if step % 100 == 0 || *step == 1 {
            println!(
                "step {step:5}  loss {loss:.5}  best {best:.5}  ratio {:.4}  t={:?}",
                best / loss0,
                t0.elapsed()
            );
        }
    }
    println!(
        "loss0 {loss0:.5} best {best:.5} ratio {:.4} elapsed {:?}",
        best / loss0,
        t0.elapsed()
    );
    let _ = std::fs::remove_dir_all(&dir);
}
