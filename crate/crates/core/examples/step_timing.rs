//! Times full-batch training epochs for the default modular-addition setup.

use std::time::Instant;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use grokking_core::model::{init_params, ModelConfig};
use grokking_core::tasks::gen_mod_add;
use grokking_core::training::{train_step, AdamW, TrainConfig};

fn main() {
    let ds = gen_mod_add(113, 0).unwrap();
    let (tokens, labels) = ds.batch(&ds.train_idx);
    for model in [ModelConfig::standard(114), ModelConfig::spherical(114)] {
        let mut params = init_params::<f32>(&model).unwrap();
        let mut opt = AdamW::for_params(&params);
        let cfg = TrainConfig::default();
        let steps = 20;
        let start = Instant::now();
        for _ in 0..steps {
            train_step(&mut params, &mut opt, &model, &cfg, &tokens, &labels).unwrap();
        }
        println!("{:?}: {:.1} ms/epoch", model.norm_mode, start.elapsed().as_secs_f64() * 1e3 / steps as f64);
    }
}
