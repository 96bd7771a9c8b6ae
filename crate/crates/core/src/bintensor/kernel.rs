//! XOR-popcount tile kernel with runtime CPU feature selection.

use std::sync::OnceLock;

type TileFn = fn(&[u64], &[u64], usize, &mut [u32]);

/// Mismatch counts between every patch and every filter.
///
/// `patches` holds `P` runs of `len` words and `filters` holds `F` runs of
/// `len` words. `out[p * F + f]` receives `popcount(patch_p ^ filter_f)`.
pub(crate) fn mismatch_tile(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
    static KERNEL: OnceLock<TileFn> = OnceLock::new();
    debug_assert_eq!(patches.len() % len, 0);
    debug_assert_eq!(filters.len() % len, 0);
    debug_assert_eq!(out.len(), (patches.len() / len) * (filters.len() / len));
    (KERNEL.get_or_init(select))(patches, filters, len, out)
}

fn select() -> TileFn {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f")
            && std::arch::is_x86_feature_detected!("avx512vpopcntdq")
        {
            return tile_avx512;
        }
        if std::arch::is_x86_feature_detected!("popcnt") {
            return tile_popcnt;
        }
    }
    tile_portable
}

#[inline(always)]
fn run_popcount(a: &[u64], w: &[u64]) -> u32 {
    a.iter().zip(w).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[inline(always)]
fn tile_body(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
    let n_filters = filters.len() / len;
    let n_patches = patches.len() / len;
    // Four patches share each pass over a filter so filter words are loaded once.
    let full = n_patches / 4 * 4;
    for (f, w) in filters.chunks_exact(len).enumerate() {
        let mut p = 0;
        while p < full {
            let a0 = &patches[p * len..(p + 1) * len];
            let a1 = &patches[(p + 1) * len..(p + 2) * len];
            let a2 = &patches[(p + 2) * len..(p + 3) * len];
            let a3 = &patches[(p + 3) * len..(p + 4) * len];
            let (mut c0, mut c1, mut c2, mut c3) = (0u64, 0u64, 0u64, 0u64);
            for i in 0..len {
                let wi = w[i];
                c0 += (a0[i] ^ wi).count_ones() as u64;
                c1 += (a1[i] ^ wi).count_ones() as u64;
                c2 += (a2[i] ^ wi).count_ones() as u64;
                c3 += (a3[i] ^ wi).count_ones() as u64;
            }
            out[p * n_filters + f] = c0 as u32;
            out[(p + 1) * n_filters + f] = c1 as u32;
            out[(p + 2) * n_filters + f] = c2 as u32;
            out[(p + 3) * n_filters + f] = c3 as u32;
            p += 4;
        }
        for p in full..n_patches {
            out[p * n_filters + f] = run_popcount(&patches[p * len..(p + 1) * len], w);
        }
    }
}

fn tile_portable(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
    tile_body(patches, filters, len, out)
}

#[cfg(target_arch = "x86_64")]
fn tile_popcnt(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
    #[target_feature(enable = "popcnt")]
    unsafe fn inner(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
        tile_body(patches, filters, len, out)
    }
    // SAFETY: selected only after runtime detection of popcnt.
    unsafe { inner(patches, filters, len, out) }
}

#[cfg(target_arch = "x86_64")]
fn tile_avx512(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
    #[target_feature(enable = "avx512f,avx512bw,avx512vl,avx512vpopcntdq,popcnt")]
    unsafe fn inner(patches: &[u64], filters: &[u64], len: usize, out: &mut [u32]) {
        tile_body(patches, filters, len, out)
    }
    // SAFETY: selected only after runtime detection of avx512f and avx512vpopcntdq.
    unsafe { inner(patches, filters, len, out) }
}
