//! Prints the sparse encoder layouts for a short sequence and compares the
//! number of attended pairs with dense prefix attention as `T` grows.

use tracformer::masks::{dense_prefix_mask, mask_population, sparse_prefix_mask, sparse_suffix_mask};

fn render(layout: &tracformer::masks::MaskLayout) -> String {
    let len = layout.len();
    let mut out = String::new();
    for t in 1..=len {
        let row = layout.row(t);
        out.extend((1..=len).map(|k| if row.contains(&k) { '#' } else { '.' }));
        out.push('\n');
    }
    out
}

fn main() -> tracformer::Result<()> {
    let (len, n_max) = (16, 4);
    for layer in 1..=4 {
        println!("prefix layer {layer}\n{}", render(&sparse_prefix_mask(layer, len, n_max)?));
    }
    println!("suffix layer 2\n{}", render(&sparse_suffix_mask(2, len, n_max)?));

    println!("{:>6} {:>10} {:>10}", "T", "sparse", "dense");
    for len in [64usize, 256, 1024] {
        let layers = len.next_power_of_two().trailing_zeros() as usize;
        let (mut sparse, mut dense) = (0, 0);
        for l in 1..=layers {
            sparse += mask_population(&sparse_prefix_mask(l, len, 8)?);
            dense += mask_population(&dense_prefix_mask(l, len)?);
        }
        println!("{len:>6} {sparse:>10} {dense:>10}");
    }
    Ok(())
}
