//! Cascaded encoder: a causal first pass feeding a second pass with bounded
//! right context. Measures how far ahead each output can see.

use streamformer::cascade::{cascade_forward, init_cascade_weights};
use streamformer::config::{AttentionKind, CascadeConfig, EncoderConfig};
use streamformer::conformer::init_weights;
use streamformer::Rng;

fn main() -> streamformer::Result<()> {
    let enc = EncoderConfig {
        input_dim: 8,
        model_dim: 16,
        total_blocks: 2,
        heads: 2,
        conv_kernel: 5,
        attn_left_context: 6,
        attention_kind: AttentionKind::Performer,
        ..EncoderConfig::default()
    };
    let cas = CascadeConfig {
        model_dim: 16,
        blocks: 3,
        right_context: 5,
        left_context: 6,
        heads: 2,
        conv_kernel: 5,
        ..CascadeConfig::for_first_pass(16)
    };
    println!("total lookahead: {} frames", cas.total_lookahead());

    let mut rng = Rng::new(11);
    let ew = init_weights::<f64>(&enc, &mut rng)?;
    let cw = init_cascade_weights::<f64>(&cas, &mut rng)?;
    let x = rng.normal_matrix::<f64>(40, enc.input_dim, 1.0);
    let base = cascade_forward(&x, &ew, &enc, &cw, &cas)?;

    let probe = 30;
    let mut y = x.clone();
    for (c, v) in y.row_mut(probe).iter_mut().enumerate() {
        *v += 1.0 + c as f64;
    }
    let moved = cascade_forward(&y, &ew, &enc, &cw, &cas)?;
    let first_changed = |a: &streamformer::Matrix<f64>, b: &streamformer::Matrix<f64>| {
        (0..a.rows()).find(|&t| a.row(t) != b.row(t))
    };
    println!(
        "perturbing frame {probe}: first pass changes from frame {:?}, second pass from frame {:?}",
        first_changed(&base.first, &moved.first),
        first_changed(&base.second, &moved.second)
    );
    Ok(())
}
