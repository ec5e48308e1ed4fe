use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::Node;
use crate::clock::{Clock, Timestamp};
use crate::eggsim::DeviceNode;

const MAX_DATAGRAM: usize = 2048;
const IDLE_WAIT: Duration = Duration::from_millis(20);

fn send_all<N: Node + ?Sized>(node: &mut N, socket: &UdpSocket, now: Timestamp, connected: bool) {
    while let Some((to, bytes)) = node.poll_transmit() {
        let r = if connected {
            socket.send(&bytes)
        } else {
            socket.send_to(&bytes, to)
        };
        if let Err(e) = r {
            if e.kind() == ErrorKind::ConnectionRefused {
                node.handle_unreachable(now);
            } else {
                log::warn!("send to {to}: {e}");
            }
        }
    }
}

/// Runs a shared node on a bound socket until `stop` is set.
pub fn serve<N: Node>(node: &Mutex<N>, socket: &UdpSocket, clock: &dyn Clock, stop: &AtomicBool) {
    let mut buf = [0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        let wait = {
            let n = node.lock().unwrap();
            n.poll_timeout()
                .map(|t| t.saturating_sub(clock.now()).min(IDLE_WAIT))
                .unwrap_or(IDLE_WAIT)
                .max(Duration::from_millis(1))
        };
        let _ = socket.set_read_timeout(Some(wait));
        let got = socket.recv_from(&mut buf);
        let now = clock.now();
        let mut n = node.lock().unwrap();
        match got {
            Ok((len, from)) => n.handle_datagram(from, &buf[..len], now),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => log::debug!("recv: {e}"),
        }
        if n.poll_timeout().is_some_and(|t| t <= now) {
            n.handle_timeout(now);
        }
        send_all(&mut *n, socket, now, false);
    }
}

/// A device socket connected to the server, so ICMP refusals surface as
/// errors.
pub fn connect_device_socket(server: SocketAddr) -> std::io::Result<UdpSocket> {
    let bind: SocketAddr = if server.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    };
    let s = UdpSocket::bind(bind)?;
    s.connect(server)?;
    s.set_nonblocking(true)?;
    Ok(s)
}

/// Drives devices over real sockets until `until` or `stop`.
pub fn run_fleet(
    devices: &mut [DeviceNode],
    sockets: &[UdpSocket],
    clock: &dyn Clock,
    until: Timestamp,
    stop: &AtomicBool,
) {
    let mut buf = [0u8; MAX_DATAGRAM];
    loop {
        let now = clock.now();
        if now >= until || stop.load(Ordering::Relaxed) {
            break;
        }
        let mut busy = false;
        for (d, s) in devices.iter_mut().zip(sockets) {
            loop {
                match s.recv_from(&mut buf) {
                    Ok((len, from)) => {
                        busy = true;
                        d.handle_datagram(from, &buf[..len], now);
                    }
                    Err(e) if e.kind() == ErrorKind::ConnectionRefused => {
                        d.handle_unreachable(now);
                    }
                    Err(_) => break,
                }
            }
            if d.poll_timeout().is_some_and(|t| t <= now) {
                d.handle_timeout(now);
            }
            send_all(d, s, now, true);
        }
        if !busy {
            let next = devices
                .iter()
                .filter_map(|d| d.poll_timeout())
                .min()
                .map(|t| t.saturating_sub(clock.now()))
                .unwrap_or(IDLE_WAIT);
            std::thread::sleep(next.clamp(Duration::from_millis(1), Duration::from_millis(5)));
        }
    }
}
