//! Saves encoder and second-pass weights to one container, reloads them and
//! checks the forward pass is bit-identical.

use streamformer::cascade::{cascade_forward, init_cascade_weights};
use streamformer::config::{CascadeConfig, EncoderConfig};
use streamformer::conformer::init_weights;
use streamformer::weights_io::{load_weights, save_weights};
use streamformer::Rng;

fn main() -> streamformer::Result<()> {
    let enc = EncoderConfig {
        input_dim: 12,
        model_dim: 24,
        total_blocks: 3,
        conv_only_blocks: 1,
        heads: 3,
        conv_kernel: 5,
        attn_left_context: 4,
        ..EncoderConfig::default()
    };
    let cas = CascadeConfig {
        model_dim: 24,
        blocks: 2,
        heads: 3,
        right_context: 4,
        ..CascadeConfig::for_first_pass(24)
    };
    let mut rng = Rng::new(5);
    let ew = init_weights::<f32>(&enc, &mut rng)?;
    let cw = init_cascade_weights::<f32>(&cas, &mut rng)?;

    let path = std::env::temp_dir().join("streamformer_roundtrip.sfw");
    save_weights(&path, &ew, &enc, Some((&cw, &cas)))?;
    let bytes = std::fs::metadata(&path)?.len();
    let (ew2, cw2) = load_weights::<f32>(&path, &enc, Some(&cas))?;
    let cw2 = cw2.expect("second pass requested");

    let x = rng.normal_matrix::<f32>(20, enc.input_dim, 1.0);
    let a = cascade_forward(&x, &ew, &enc, &cw, &cas)?;
    let b = cascade_forward(&x, &ew2, &enc, &cw2, &cas)?;
    println!(
        "{bytes} bytes; first pass identical: {}, second pass identical: {}",
        a.first.bit_eq(&b.first),
        a.second.bit_eq(&b.second)
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
