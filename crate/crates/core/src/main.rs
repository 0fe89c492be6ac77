#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = maskscalar::cli::run(std::env::args_os(), &mut stdout) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
