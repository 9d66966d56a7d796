//! No-echo credential prompt on the controlling terminal.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::io::AsRawFd;

/// Read one secret line from /dev/tty with echo disabled. Fails when there
/// is no terminal (scripted runs pass `--credential-file` instead).
pub fn read_secret(prompt: &str) -> io::Result<String> {
    let tty = File::options().read(true).write(true).open("/dev/tty")?;
    let fd = tty.as_raw_fd();

    let mut termios = unsafe { std::mem::zeroed::<libc::termios>() };
    if unsafe { libc::tcgetattr(fd, &mut termios) } != 0 {
        return Err(io::Error::last_os_error());
    }
    let saved = termios;
    termios.c_lflag &= !libc::ECHO;
    termios.c_lflag |= libc::ECHONL;
    if unsafe { libc::tcsetattr(fd, libc::TCSANOW, &termios) } != 0 {
        return Err(io::Error::last_os_error());
    }

    let result = (|| {
        let mut out = &tty;
        out.write_all(prompt.as_bytes())?;
        out.flush()?;
        let mut line = String::new();
        BufReader::new(&tty).read_line(&mut line)?;
        Ok(line.trim_end_matches(['\n', '\r']).to_owned())
    })();

    unsafe { libc::tcsetattr(fd, libc::TCSANOW, &saved) };
    result
}
