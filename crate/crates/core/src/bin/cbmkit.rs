use clap::Parser;

use cbmkit::pipeline::cli::{execute, Cli};

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            std::process::exit(cbmkit::pipeline::EXIT_CONFIG);
        }
    }
    std::process::exit(execute(&cli));
}
