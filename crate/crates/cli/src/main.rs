use clap::Parser;

use replaylens_cli::cli::Cli;

fn main() {
    let cli = Cli::parse();
    match cli.execute() {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
