use epiforge::adapt::*;
use epiforge::encoder::{EncoderConfig, EncoderState};
use epiforge::dataset::{PixelImage, preprocess_eval, ImageTensor};
use epiforge::seeds;
use rand::Rng;

fn tiny_encoder(seed: u64) -> EncoderState {
    EncoderState::init(EncoderConfig { patch_size: 64, embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2.0, input_size: 128 }, seed).unwrap()
}

fn support_items(n_per_class: usize, n_classes: usize, seed: u64) -> Vec<(ImageTensor, usize)> {
    let mut items = Vec::new();
    for class in 0..n_classes {
        for i in 0..n_per_class {
            let mut rng = seeds::stream(seed, &[class as u64, i as u64]);
            let mut data = vec![0u8; 160 * 160 * 3];
            for (j, v) in data.iter_mut().enumerate() {
                let base = if j % 3 == class % 3 { 200 } else { 40 };
                *v = (base + rng.gen_range(0..40)) as u8;
            }
            let img = PixelImage::new(160, 160, data);
            items.push((preprocess_eval(&img).unwrap(), class));
        }
    }
    items
}

#[test]
fn diag_loss_curve() {
    let items = support_items(3, 3, 7);
    let tensors: Vec<_> = items.iter().map(|(t, _)| t.clone()).collect();
    let labels: Vec<_> = items.iter().map(|(_, l)| *l).collect();
    for seed in 0..5 {
        let encoder = tiny_encoder(seed);
        let f = encoder.encode(&tensors).unwrap();
        let head = attach_head(&f, &labels, 3).unwrap();
        print!("seed {seed}: ");
        for steps in [0, 1, 2, 4, 8, 16] {
            let (e2, h2) = finetune_pmt(&encoder, &head, &items, 1e-3, steps, 0.0).unwrap();
            let f2 = e2.encode(&tensors).unwrap();
            let loss = epiforge::fewshot::cross_entropy(&h2.logits(&f2), &labels).unwrap();
            print!("{steps}:{loss:.6} ");
        }
        println!();
    }
}
