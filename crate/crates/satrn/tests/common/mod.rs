#![allow(dead_code)]

pub mod gradsuite;

/// Run the complete gradient suite: every primitive, then the composite
/// blocks and the full tiny model.
pub fn run_full_gradient_suite() {
    gradsuite::matmul_grads();
    gradsuite::conv2d_grads();
    gradsuite::pool_grads();
    gradsuite::pointwise_grads();
    gradsuite::normalization_grads();
    gradsuite::lookup_and_loss_grads();
    gradsuite::shape_op_grads();
    gradsuite::dropout_grads_with_fixed_mask();
    gradsuite::shallow_cnn_composite();
    gradsuite::adaptive_pe_composite();
    gradsuite::encoder_block_pointwise();
    gradsuite::encoder_block_conv3();
    gradsuite::encoder_block_separable();
    gradsuite::decoder_layer_composite();
    gradsuite::full_tiny_model_end_to_end();
}
