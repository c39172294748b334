//! Dense reverse-mode automatic differentiation.

pub mod bn;
pub mod kernels;
mod tape;
mod tensor;

pub use bn::{BnMode, BnState};
pub use kernels::ConvGeom;
pub use tape::{heaviside, OpKind, RateKernel, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_scaling_and_depthwise_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, w, 1, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let x = tape.constant(t(&[1, 2, 2, 2], &xs));
        let w = tape.constant(t(&[2, 1, 1, 1], &[1.0, -1.0]));
        let y = tape.conv2d(x, w, 2, 1, 0).unwrap();
        assert_eq!(&tape.value(y).data()[..4], &xs[..4]);
        let neg: Vec<f64> = xs[4..].iter().map(|v| -v).collect();
        assert_eq!(&tape.value(y).data()[4..], &neg[..]);
    }

    #[test]
    fn conv_rejects_indivisible_groups() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 2, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn batch_norm_constant_input_gives_zeros() {
        let mut tape = Tape::new();
        let mut st = BnState::new(2);
        let x = tape.leaf(p(&[3, 2], &[5.0, -1.0, 5.0, -1.0, 5.0, -1.0]));
        let y = tape.batch_norm(x, &mut st, None, BnMode::TrainGraph).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.node_count(), 1);
    }

    #[test]
    fn batch_norm_accumulate_records_nothing() {
        let mut tape = Tape::new();
        let mut st = BnState::new(1);
        let x = tape.leaf(p(&[4, 1], &[2.0, 4.0, 2.0, 4.0]));
        tape.batch_norm(x, &mut st, None, BnMode::AccumulateStats).unwrap();
        assert_eq!(tape.node_count(), 0);
        assert!((st.running_mean[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_eval_depends_only_on_running_stats() {
        let mut st = BnState::<f64>::new(1);
        st.running_mean[0] = 1.5;
        st.running_var[0] = 4.0;
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[3.0, 0.0]));
        let b = tape.constant(t(&[3, 1], &[3.0, 9.0, -4.0]));
        let ya = tape.batch_norm(a, &mut st, None, BnMode::Eval).unwrap();
        let yb = tape.batch_norm(b, &mut st, None, BnMode::Eval).unwrap();
        assert_eq!(tape.value(ya).data()[0], tape.value(yb).data()[0]);
        assert_eq!(st.running_mean[0], 1.5);
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let mut tape = Tape::<f64>::new();
        let mut st = BnState::new(2);
        let x = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            tape.batch_norm(x, &mut st, None, BnMode::TrainGraph),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(p(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s, false).unwrap();
        // subgradient 0 at exactly 0
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
        let z = tape.constant(t(&[2], &[0.5, 3.0]));
        let yz = tape.relu(z);
        assert_eq!(tape.value(yz).data(), &[0.5, 3.0]);
    }

    #[test]
    fn global_avg_pool_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let c = tape.constant(Tensor::full(&[2, 3, 2, 5], 1.25));
        let y = tape.global_avg_pool(c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn log_softmax_symmetry_and_shift() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let a = tape.constant(t(&[1, 3], &[0.3, -1.2, 2.0]));
        let b = tape.constant(t(&[1, 3], &[100.3, 98.8, 102.0]));
        let (ya, yb) = (tape.log_softmax(a).unwrap(), tape.log_softmax(b).unwrap());
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let s: f64 = tape.value(ya).data().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_wx_broadcasts_x() {
        let mut tape = Tape::new();
        let w = tape.leaf(p(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let x = tape.constant(t(&[3, 1], &[1.0, -2.0, 0.5]));
        let y = tape.matmul(w, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l, false).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_is_idempotent_without_accumulate() {
        let mut tape = Tape::new();
        let w = tape.leaf(p(&[1, 2], &[0.3, -0.7]));
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(w, x).unwrap();
        let y = tape.relu(y);
        let l = tape.sum(y);
        tape.backward(l, false).unwrap();
        let first = tape.grad(w).unwrap().to_vec();
        tape.backward(l, false).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &first[..]);
        tape.backward(l, true).unwrap();
        let doubled: Vec<f64> = first.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(w).unwrap(), &doubled[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(p(&[2], &[1.0, 2.0]));
        let y = tape.scale(w, 2.0);
        assert!(matches!(tape.backward(y, false), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_record_no_nodes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        let _ = tape.relu(c);
        assert_eq!(tape.node_count(), 0);
        assert_eq!(tape.retained_bytes(), 0);
    }

    #[test]
    fn retained_bytes_is_sum_of_node_records() {
        let mut tape = Tape::new();
        let w = tape.leaf(p(&[3, 4], &[0.1; 12]));
        let x = tape.constant(Tensor::full(&[5, 4], 1.0));
        let y = tape.linear(x, w).unwrap();
        let y = tape.relu(y);
        let ls = tape.log_softmax(y).unwrap();
        let _ = tape.sum(ls);
        let per_node = tape.node_saved_bytes();
        assert_eq!(per_node.iter().sum::<usize>(), tape.retained_bytes());
        // x (20) for linear, relu input (15), log-softmax output (15), sum weights (15)
        assert_eq!(tape.retained_bytes(), (20 + 15 + 15 + 15) * 8);
    }
}
