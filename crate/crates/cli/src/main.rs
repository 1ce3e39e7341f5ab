// Training allocates and frees many large tensors per step; mimalloc keeps
// those pages mapped instead of faulting them in again every graph.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(shapeprior_cli::run(std::env::args_os()));
}
