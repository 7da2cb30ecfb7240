//! Analytic parameter gradients of every trainable block against central
//! finite differences, at 64-bit and 32-bit precision.

#[path = "support/gradient_oracle.rs"]
mod oracle;

macro_rules! both_precisions {
    ($($name:ident),*) => {
        $(
            #[test]
            fn $name() {
                let e64 = oracle::$name::<f64>();
                assert!(e64 < oracle::TOL_F64, "f64 relative error {e64:.3e}");
                let e32 = oracle::$name::<f32>();
                assert!(e32 < oracle::TOL_F32, "f32 relative error {e32:.3e}");
            }
        )*
    };
}

mod gradient_oracle {
    use super::oracle;
    both_precisions!(conv_stream, window_attention, transformer_stream, projector, gate, cct, head_and_pool, contrastive_batch, end_to_end);
}
