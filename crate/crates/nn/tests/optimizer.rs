use depflow_nn::{AdamW, Linear, ParamStore, Session};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn adamw_fits_linear_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 2, 1, &mut rng);
    let x = Array2::from_shape_vec((4, 2), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let y = x.dot(&Array2::from_shape_vec((2, 1), vec![2.0, -1.0]).unwrap()) + 0.5;
    let mut opt = AdamW::new(0.05, 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..600 {
        let grads = {
            let s = Session::eval(&store);
            let pred = lin.forward(&s, s.input(x.clone()));
            let diff = s.sub(pred, s.input(y.clone()));
            let loss = s.mean(s.square(diff));
            last = s.scalar(loss);
            s.backward(loss).params().clone()
        };
        opt.step(&mut store, &grads);
    }
    assert!(last < 1e-6, "final loss {last}");
}

#[test]
fn frozen_parameters_do_not_move() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 2, 1, &mut rng);
    let before = store.get(lin.weight).clone();
    let mut opt = AdamW::new(0.1, 0.01);
    opt.freeze(lin.weight);
    let grads = {
        let s = Session::eval(&store);
        let out = lin.forward(&s, s.input(Array2::ones((3, 2))));
        let l = s.sum(out);
        s.backward(l).params().clone()
    };
    opt.step(&mut store, &grads);
    assert_eq!(*store.get(lin.weight), before);
    assert_ne!(store.get(lin.bias)[[0, 0]], 0.0);
}
