use pdm_ssd::bench::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    std::process::exit(pdm_ssd::cli::run(std::env::args_os()));
}
