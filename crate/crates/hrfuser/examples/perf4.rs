use rayon::prelude::*;
use std::time::Instant;

fn main() {
    // raw rayon dispatch cost
    let mut v = vec![0.0f64; 4 * 1000];
    for _ in 0..3 {
        let t = Instant::now();
        let n = 1000;
        for _ in 0..n {
            v.par_chunks_mut(1000).for_each(|c| { c[0] += 1.0; });
        }
        println!("par_chunks 4 tasks: {:?}/dispatch", t.elapsed() / n);
    }
    let t = Instant::now();
    let n = 1000;
    for _ in 0..n {
        rayon::join(|| {}, || {});
    }
    println!("join: {:?}/call", t.elapsed() / n);

    // serial baseline: 200k MAC matmul
    let a = vec![1.0f64; 16 * 4];
    let b = vec![1.0f64; 4 * 784];
    let mut o = vec![0.0f64; 16 * 784];
    let t = Instant::now();
    let n = 2000;
    for _ in 0..n {
        o.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..16 {
            for l in 0..4 {
                let av = a[i * 4 + l];
                let br = &b[l * 784..(l + 1) * 784];
                for (x, &y) in o[i * 784..(i + 1) * 784].iter_mut().zip(br) {
                    *x += av * y;
                }
            }
        }
    }
    println!("serial 200k MAC mm: {:?}/iter", t.elapsed() / n);
}
