fn main() {
    // Die quietly when a pipe reader (head, grep -m1, …) hangs up early.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(lutflow::cli::run());
}
