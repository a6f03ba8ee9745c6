//! Linear-time causal kernel attention against the dense masked product,
//! one instance per kernel.

use streamformer::attention::performer_causal;
use streamformer::attention::reference::dense_kernel_attention;
use streamformer::verify::random_kernel_instance;

fn main() -> streamformer::Result<()> {
    for seed in 0..5 {
        let (kind, qp, kp, v) = random_kernel_instance(seed);
        let fast = performer_causal(&qp, &kp, &v, 1e-6)?;
        let dense = dense_kernel_attention(&qp, &kp, &v, true, 1e-6)?;
        println!(
            "{:<8} T={:<3} r={:<3} max relative error {:.2e}",
            kind.name(),
            v.rows(),
            qp.cols(),
            fast.max_rel_diff(&dense)
        );
    }
    Ok(())
}
