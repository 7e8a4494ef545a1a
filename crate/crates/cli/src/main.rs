use clap::Parser;
use streamgate_cli::commands::{run, Cli};

fn main() {
    // clap exits with 2 on usage errors; anything the commands refuse is 1
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
