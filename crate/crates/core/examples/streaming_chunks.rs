//! Feeds an utterance through the streaming encoder in uneven chunks and
//! compares against the whole-utterance forward pass.

use streamformer::config::{AttentionKind, EncoderConfig};
use streamformer::conformer::{encoder_forward, init_weights};
use streamformer::streaming::StreamState;
use streamformer::{Matrix, Rng};

fn main() -> streamformer::Result<()> {
    for kind in [AttentionKind::Explicit, AttentionKind::Performer] {
        let cfg = EncoderConfig {
            input_dim: 16,
            model_dim: 32,
            total_blocks: 4,
            conv_only_blocks: 1,
            heads: 4,
            conv_kernel: 7,
            attn_left_context: 8,
            attention_kind: kind,
            ..EncoderConfig::default()
        };
        let mut rng = Rng::new(3);
        let weights = init_weights::<f64>(&cfg, &mut rng)?;
        let x = rng.normal_matrix::<f64>(50, cfg.input_dim, 1.0);
        let batch = encoder_forward(&x, &weights, &cfg)?;

        let mut state = StreamState::new(&cfg)?;
        let mut streamed = Matrix::zeros(0, cfg.model_dim);
        let mut start = 0;
        for size in [1, 3, 0, 7, 1, 20, 18] {
            streamed.append_rows(&state.step(
                &x.slice_rows(start..start + size),
                &weights,
                &cfg,
            )?)?;
            start += size;
        }
        let census = state.census();
        println!(
            "{kind:?}: {} frames, max relative error {:.1e}, state {} of {} scalars",
            state.frames_emitted(),
            streamed.max_rel_diff(&batch),
            census.physical_held,
            census.physical_capacity
        );
    }
    Ok(())
}
