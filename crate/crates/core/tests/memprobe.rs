use hyperspace::memprobe::{self, CountingAlloc};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[test]
fn peak_covers_a_temporary_allocation() {
    let (sum, peak, source) = memprobe::measure(|| {
        let v = vec![1u8; 8 << 20];
        v.iter().map(|&x| x as usize).sum::<usize>()
    });
    assert_eq!(sum, 8 << 20);
    assert_eq!(source, memprobe::SOURCE_HEAP);
    assert!(peak >= 8 << 20, "peak {peak}");
    let (_, small, _) = memprobe::measure(|| vec![0u8; 1024].len());
    assert!(small < 8 << 20);
}
