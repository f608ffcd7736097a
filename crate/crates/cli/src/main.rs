use clap::Parser;

fn main() {
    let cli = latent_brrr_cli::Cli::parse();
    if let Err(e) = latent_brrr_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
