use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use super::{LinkProfile, TokenBucket};

/// Largest number of bytes released by one token grant.
pub const MAX_GRANT: usize = 64 * 1024;
/// Target interval between grants on a saturated channel.
pub const REFILL_PERIOD: Duration = Duration::from_millis(10);
const MIN_GRANT: usize = 512;
/// Oversleep a bucket compensates for, as time at its own rate.
const BURST_WINDOW: f64 = 2e-4;

thread_local! {
    static SLACK_SET: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Sleeps for `d` with the thread's timer slack reduced to 1 ns.
///
/// The Linux default slack of 50 us is a large fraction of sub-millisecond
/// transfer times on fast links.
pub fn sleep_precise(d: Duration) {
    if d.is_zero() {
        return;
    }
    #[cfg(target_os = "linux")]
    SLACK_SET.with(|set| {
        if !set.get() {
            // SAFETY: PR_SET_TIMERSLACK only changes this thread's timer slack.
            unsafe {
                libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0);
            }
            set.set(true);
        }
    });
    thread::sleep(d);
}

/// One instance of a link profile. Channels opened from the same shaper
/// share its aggregate bandwidth.
#[derive(Clone)]
pub struct Shaper {
    inner: Arc<ShaperInner>,
}

struct ShaperInner {
    profile: LinkProfile,
    aggregate: Option<TokenBucket>,
}

fn bucket_for(rate: f64) -> Option<TokenBucket> {
    rate.is_finite()
        .then(|| TokenBucket::new(rate, (rate * BURST_WINDOW).min(MAX_GRANT as f64)))
}

impl Shaper {
    pub fn new(profile: LinkProfile) -> Self {
        Self {
            inner: Arc::new(ShaperInner {
                aggregate: bucket_for(profile.aggregate_rate()),
                profile,
            }),
        }
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.inner.profile
    }

    /// A per-connection pacer drawing on this shaper's aggregate budget.
    pub fn pacer(&self) -> Pacer {
        let p = &self.inner.profile;
        let single = bucket_for(p.single_conn_rate());
        let rate = p.single_conn_rate().min(p.aggregate_rate());
        let grant = if rate.is_finite() {
            ((rate * REFILL_PERIOD.as_secs_f64()) as usize).clamp(MIN_GRANT, MAX_GRANT)
        } else {
            usize::MAX
        };
        Pacer {
            shaper: self.clone(),
            single,
            grant,
        }
    }
}

impl std::fmt::Debug for Shaper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("Shaper").field(&self.inner.profile).finish()
    }
}

/// Paces one connection's bytes.
pub struct Pacer {
    shaper: Shaper,
    single: Option<TokenBucket>,
    grant: usize,
}

impl Pacer {
    pub fn latency(&self) -> Duration {
        self.shaper.inner.profile.latency()
    }

    pub fn grant_size(&self) -> usize {
        self.grant
    }

    pub fn is_unshaped(&self) -> bool {
        self.single.is_none() && self.shaper.inner.aggregate.is_none()
    }

    /// Blocks until `n` bytes may leave.
    pub fn pace(&self, n: usize) {
        sleep_precise(self.reserve(n));
    }

    /// Blocks for the first-byte delay and then until `n` bytes may leave,
    /// in one sleep.
    pub fn pace_first(&self, n: usize) {
        sleep_precise(self.latency() + self.reserve(n));
    }

    /// Takes tokens for `n` bytes and returns how long to wait for them.
    fn reserve(&self, n: usize) -> Duration {
        let mut wait = Duration::ZERO;
        if let Some(b) = &self.single {
            wait = wait.max(b.take(n as u64));
        }
        if let Some(b) = &self.shaper.inner.aggregate {
            wait = wait.max(b.take(n as u64));
        }
        wait
    }

    /// Blocks for the first-byte delay.
    pub fn delay_first_byte(&self) {
        sleep_precise(self.latency());
    }

    /// Runs `len` bytes through latency and pacing without moving data.
    /// `abort_after` stops early and returns `false` once that many bytes
    /// have been paced.
    pub fn simulate(&self, len: usize, abort_after: Option<usize>) -> bool {
        let mut done = 0;
        let mut first = true;
        let mut step = |n: usize| {
            if std::mem::take(&mut first) {
                self.pace_first(n);
            } else {
                self.pace(n);
            }
        };
        if len == 0 {
            step(0);
        }
        while done < len {
            let n = (len - done).min(self.grant);
            if let Some(limit) = abort_after {
                if done + n > limit {
                    step(limit.saturating_sub(done));
                    return false;
                }
            }
            step(n);
            done += n;
        }
        true
    }
}

/// Shapes writes to an inner stream.
///
/// A burst starts at the first write after construction or after
/// [`flush`](Write::flush); the burst's first byte is held back by the
/// profile latency. Writes are released in grants, each after its tokens
/// are available, so the last byte of an `n`-byte burst leaves at
/// `latency + n / rate`.
pub struct ShapedWriter<W> {
    inner: W,
    pacer: Pacer,
    in_burst: bool,
}

impl<W: Write> ShapedWriter<W> {
    pub fn new(inner: W, pacer: Pacer) -> Self {
        Self {
            inner,
            pacer,
            in_burst: false,
        }
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    /// Writes bypassing the shaper, for connection setup traffic.
    pub fn write_unshaped(&mut self, buf: &[u8]) -> io::Result<()> {
        self.inner.write_all(buf)
    }
}

impl<W: Write> Write for ShapedWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let n = buf.len().min(self.pacer.grant);
        if self.in_burst {
            self.pacer.pace(n);
        } else {
            self.pacer.pace_first(n);
            self.in_burst = true;
        }
        self.inner.write_all(&buf[..n])?;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.in_burst = false;
        self.inner.flush()
    }
}

/// One side of a shaped loopback connection.
pub struct ShapedEnd {
    pub reader: TcpStream,
    pub writer: ShapedWriter<TcpStream>,
}

impl Read for ShapedEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.reader.read(buf)
    }
}

impl Write for ShapedEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

impl ShapedEnd {
    fn new(stream: TcpStream, shaper: &Shaper) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: stream.try_clone()?,
            writer: ShapedWriter::new(stream, shaper.pacer()),
        })
    }

    pub fn shutdown(&self) -> io::Result<()> {
        self.reader.shutdown(Shutdown::Both)
    }
}

/// A bidirectional loopback byte channel shaped in both directions.
pub struct ShapedChannel {
    pub near: ShapedEnd,
    pub far: ShapedEnd,
}

pub fn open_shaped_channel(shaper: &Shaper) -> io::Result<ShapedChannel> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let near = TcpStream::connect(listener.local_addr()?)?;
    let (far, _) = listener.accept()?;
    Ok(ShapedChannel {
        near: ShapedEnd::new(near, shaper)?,
        far: ShapedEnd::new(far, shaper)?,
    })
}

/// Times a `size`-byte transfer split evenly over `n_conns` fresh channels
/// of one profile instance, from the first write until the receiver holds
/// the last byte.
pub fn measure_transfer(profile: &LinkProfile, size: u64, n_conns: u32) -> io::Result<Duration> {
    let n = n_conns.max(1) as usize;
    let shaper = Shaper::new(profile.clone());
    let channels = (0..n)
        .map(|_| open_shaped_channel(&shaper))
        .collect::<io::Result<Vec<_>>>()?;
    let size = size as usize;
    let lens: Vec<usize> = (0..n).map(|i| size / n + usize::from(i < size % n)).collect();
    let data = Arc::new(vec![0xA5u8; lens[0].max(1)]);

    let mut readers = Vec::with_capacity(n);
    let mut writers = Vec::with_capacity(n);
    for (ch, &len) in channels.into_iter().zip(&lens) {
        let ShapedChannel { near, mut far } = ch;
        readers.push(thread::spawn(move || -> io::Result<Instant> {
            let mut buf = vec![0u8; 64 * 1024];
            let mut left = len;
            while left > 0 {
                let want = left.min(buf.len());
                let got = far.reader.read(&mut buf[..want])?;
                if got == 0 {
                    return Err(io::ErrorKind::UnexpectedEof.into());
                }
                left -= got;
            }
            Ok(Instant::now())
        }));
        writers.push((near, len));
    }

    let barrier = Arc::new(Barrier::new(n + 1));
    let mut handles = Vec::new();
    let mut own = None;
    for (i, (mut near, len)) in writers.into_iter().enumerate() {
        if i == 0 && n == 1 {
            own = Some((near, len));
            continue;
        }
        let barrier = barrier.clone();
        let data = data.clone();
        handles.push(thread::spawn(move || -> io::Result<()> {
            barrier.wait();
            near.writer.write_all(&data[..len])?;
            near.writer.flush()?;
            // Keep the socket open until the reader is done.
            drop(near);
            Ok(())
        }));
    }
    // With one connection, write from this thread and skip the handoff.
    let t0 = if let Some((mut near, len)) = own {
        let t0 = Instant::now();
        near.writer.write_all(&data[..len])?;
        near.writer.flush()?;
        t0
    } else {
        barrier.wait();
        Instant::now()
    };
    for h in handles {
        h.join().expect("writer thread panicked")?;
    }
    let mut end = t0;
    for r in readers {
        end = end.max(r.join().expect("reader thread panicked")?);
    }
    Ok(end - t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netem::lookup;

    #[test]
    fn grant_size_tracks_rate() {
        let slow = Shaper::new(lookup("nc-bahrain").unwrap().with_scale(0.02)).pacer();
        // 138 kB/s for 10 ms.
        assert_eq!(slow.grant_size(), 1380);
        let fast = Shaper::new(lookup("lan").unwrap()).pacer();
        assert_eq!(fast.grant_size(), MAX_GRANT);
        assert!(Shaper::new(LinkProfile::identity()).pacer().is_unshaped());
    }

    #[test]
    fn channel_carries_bytes_both_ways() {
        let shaper = Shaper::new(LinkProfile::identity());
        let mut ch = open_shaped_channel(&shaper).unwrap();
        ch.near.write_all(b"ping").unwrap();
        ch.near.flush().unwrap();
        let mut buf = [0u8; 4];
        ch.far.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"ping");
        ch.far.write_all(b"pong").unwrap();
        ch.far.flush().unwrap();
        ch.near.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"pong");
    }

    #[test]
    fn simulate_aborts_part_way() {
        let p = Shaper::new(LinkProfile::new("t", 0.0, 100.0, 100.0).unwrap()).pacer();
        assert!(!p.simulate(10_000, Some(5_000)));
        assert!(p.simulate(10_000, None));
    }
}
