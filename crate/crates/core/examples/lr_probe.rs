use vidistill_core::adapt::*;
use vidistill_core::tokenizer::Vocabulary;
use vidistill_core::vlm::{VlmConfig, VlmModel};
use vidistill_core::world::{render_caption, render_clip, sample_frames, sample_script, Frame};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let corpus: Vec<(String, Vec<Frame>, String)> = (0..n).map(|i| {
        let script = sample_script(1000 + i as u64);
        let clip = render_clip(&script, 2000 + i as u64).unwrap();
        let frames = sample_frames(&clip, 2, 2.0).unwrap();
        (format!("clip-{i:03}"), frames, render_caption(&script).unwrap())
    }).collect();

    let mut texts: Vec<String> = corpus.iter().map(|(_, _, c)| c.clone()).collect();
    texts.push("Generate the alt-text:".to_string());
    let vocab = Vocabulary::train(&texts, 512).unwrap();

    let clips: Vec<CaptionedClip> = corpus.iter().map(|(id, f, c)| CaptionedClip {
        clip_id: id.clone(), frames: f.clone(), caption: c.clone(),
    }).collect();

    for init_std in [0.25, 0.4] {
        for lr in [1e-2, 2e-2] {
            let config = VlmConfig { max_frames: 2, init_std, ..VlmConfig::default() };
            let mut model = VlmModel::new(config, 0).unwrap();
            let adapt = AdaptConfig {
                epochs, batch_size: 8, learning_rate: lr, weight_decay: 0.01,
                warmup_fraction: 0.1, labeled_fraction: 0.5, seed: 0,
            };
            let t0 = std::time::Instant::now();
            let r = stage1_visual_adapt(&mut model, &vocab, &clips, &[], &adapt).unwrap();
            let first = r.epoch_mean_losses[0];
            let e10 = r.epoch_mean_losses[9.min(epochs - 1)];
            let last = *r.epoch_mean_losses.last().unwrap();
            eprintln!(
                "n={n} epochs={epochs} init_std={init_std:<4} lr={lr:<5} first={first:8.3} e10={e10:8.3} last={last:8.3} ratio={:.3}  [{:.0?}]",
                last / first, t0.elapsed()
            );
        }
    }
}
