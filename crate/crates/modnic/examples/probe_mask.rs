use modnic::checkpoint;
use modnic::gendata::{generate, Kind};
use modnic_core::modnet;
use modnic_core::transforms;

fn main() {
    let ck = checkpoint::load(std::path::Path::new("/tmp/accept_vbr.mnck")).expect("load");
    let mp = ck.modnet.as_ref().expect("modnet present");
    let img = generate(Kind::Blobs, 32, 1234, 100).to_tensor();
    let s = img.shape().to_vec();
    let x = modnic_core::Tensor::new(&[1, s[0], s[1], s[2]], img.data().to_vec()).unwrap();
    let y = transforms::analyze(&ck.transforms, &x).expect("analyze");
    let ay: f64 = y.data().iter().map(|v| v.abs()).sum::<f64>() / y.numel() as f64;
    let ymax = y.data().iter().cloned().fold(f64::MIN, f64::max);
    let ymin = y.data().iter().cloned().fold(f64::MAX, f64::min);
    println!("y: mean|y| {ay:.4} min {ymin:.3} max {ymax:.3} numel {}", y.numel());
    for l in [1.0, 4.0, 16.0, 64.0, 256.0] {
        let mask = modnet::modnet_forward(mp, &y, l).expect("mask");
        let d = mask.data();
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        let mn = d.iter().cloned().fold(f64::MAX, f64::min);
        let mx = d.iter().cloned().fold(f64::MIN, f64::max);
        let ym: Vec<f64> = y.data().iter().zip(d).map(|(a, b)| a * b).collect();
        let rounded: Vec<i64> = ym.iter().map(|v| v.round() as i64).collect();
        let nonzero = rounded.iter().filter(|&&v| v != 0).count();
        println!(
            "lambda {l:>5}: mask mean {mean:.5} min {mn:.5} max {mx:.5}, nonzero syms {nonzero}/{}",
            rounded.len()
        );
    }
    // And the modulator outputs themselves.
    for l in [1.0, 256.0] {
        let sc = modnet::lambda_scaled(l);
        let bm0 = modnet::bm_forward(&mp.modulators[0], sc);
        println!("lambda {l:>5}: bm0 {:?}", &bm0[..bm0.len().min(8)]);
    }
}
