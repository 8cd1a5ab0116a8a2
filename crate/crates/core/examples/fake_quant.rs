//! Learned-step fake quantization of a small vector, with the gradients the
//! straight-through estimator sends to the input and to the step size.

use cbq::quant::{fake_quant, init_step, integer_codes, QuantSpec};
use cbq::{Tape, Tensor};

fn main() -> cbq::Result<()> {
    let spec = QuantSpec::activation(4)?;
    let x = Tensor::vector(vec![-1.3, -0.41, 0.02, 0.26, 0.9, 2.4]);
    let state = init_step(&x, &spec)?;
    println!("step {:.4} (max-abs / qmax {})", state.step.data()[0], spec.qmax());

    let codes = integer_codes(&x, &state, &spec)?;
    println!("codes {:?}", codes.values);

    // a deliberately small step so the largest entry is clipped
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let step = tape.param(Tensor::scalar(0.15));
    let q = fake_quant(xv, step, &spec)?;
    println!("fake-quantized {:?}", q.value().data());

    let g = tape.backward(q.sum())?;
    println!("d/dx    {:?}", g.get_or_zeros(xv).data());
    println!("d/dstep {:.4}", g.get_or_zeros(step).data()[0]);
    Ok(())
}
