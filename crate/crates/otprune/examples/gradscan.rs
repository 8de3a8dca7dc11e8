use otprune::graph::{LayerKind, NetworkGraph};
use otprune::tensor::Tensor;
use otprune::train::{gradient_check, kink_margin};
use otprune::rng::substream;
use rand::Rng;

fn bn(c: usize) -> LayerKind {
    LayerKind::BatchNorm { channels: c, gamma: vec![0.5; c], beta: vec![0.0; c],
        running_mean: vec![0.0; c], running_var: vec![1.0; c], eps: 1e-5 }
}

fn main() {
    // Isolated conv+BN (no relu/pool) graph
    let mut rng = substream(1, "scan");
    let mut g = NetworkGraph::new((2, 5, 5));
    let i = g.add_node("input", LayerKind::Input, &[]);
    let w: Vec<f32> = (0..3*2*9).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let c1 = g.add_node("conv1", LayerKind::Conv2D { in_channels: 2, out_channels: 3,
        kernel_h: 3, kernel_w: 3, stride: 1, padding: 1, weight: w, bias: Some(vec![0.05; 3]) }, &[i]);
    let b1 = g.add_node("bn1", bn(3), &[c1]);
    let gap = g.add_node("gap", LayerKind::GlobalAvgPool, &[b1]);
    let wl: Vec<f32> = (0..3*4).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let fc = g.add_node("fc", LayerKind::Linear { in_features: 3, out_features: 4, weight: wl, bias: vec![0.0; 4] }, &[gap]);
    g.add_node("output", LayerKind::Output, &[fc]);

    let data: Vec<f32> = (0..2*2*5*5).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    let x = Tensor::from_vec(2, 2, 5, 5, data);
    let err = gradient_check(&g, &x, &[1, 3]).unwrap();
    println!("conv+bn+gap+fc (no relu): max rel err = {err:.3e}");

    // The failing fixture: toy_cnn with relu+maxpool
    let g2 = otprune::build_preset(otprune::Preset::ToyCnn, 4, 9);
    let mut rng2 = substream(9, "gradcheck_input");
    let data2: Vec<f32> = (0..4*3*8*8).map(|_| rng2.gen_range(-1.0..1.0)).collect();
    let labels2: Vec<usize> = (0..4).map(|_| rng2.gen_range(0..4)).collect();
    let x2 = Tensor::from_vec(4, 3, 8, 8, data2);
    println!("toy_cnn kink margin = {:.3e}", kink_margin(&g2, &x2).unwrap());
    let err2 = gradient_check(&g2, &x2, &labels2).unwrap();
    println!("toy_cnn: max rel err = {err2:.3e}");
}
