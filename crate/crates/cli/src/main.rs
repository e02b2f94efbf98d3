use samoe_core::bench::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc(std::alloc::System);

fn main() {
    std::process::exit(samoe_cli::run_cli(std::env::args_os()));
}
