//! Shared test support: an independent expression oracle, a seeded
//! expression-string generator, a minimal HTTP stub server, and profile
//! builders.

#![allow(dead_code)]

use adaswitch_core::agent::{
    AgentProfile, AgentRole, BackendConfig, SamplingParams, SyntheticAgentConfig,
};

pub mod expr_oracle {
    //! Brute-force reference evaluator: a second, naive recursive-descent
    //! parser over the same grammar, building its own tree and walking it.
    //! Written against the documented contract, independent of the
    //! production tokenizer/parser.

    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Signed, Zero};

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum OracleErrorKind {
        Parse,
        DivisionByZero,
        NonIntegerExponent,
        Overflow,
    }

    enum Node {
        Number(BigRational),
        Neg(Box<Node>),
        Add(Box<Node>, Box<Node>),
        Sub(Box<Node>, Box<Node>),
        Mul(Box<Node>, Box<Node>),
        Div(Box<Node>, Box<Node>),
        Pow(Box<Node>, Box<Node>),
    }

    struct P<'a> {
        chars: &'a [u8],
        pos: usize,
    }

    impl<'a> P<'a> {
        fn ws(&mut self) {
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
        }

        fn peek(&mut self) -> Option<u8> {
            self.ws();
            self.chars.get(self.pos).copied()
        }

        fn eat(&mut self, b: u8) -> bool {
            if self.peek() == Some(b) {
                self.pos += 1;
                true
            } else {
                false
            }
        }

        // expr := term { ('+'|'-') term }
        fn expr(&mut self) -> Result<Node, OracleErrorKind> {
            let mut node = self.term()?;
            loop {
                if self.eat(b'+') {
                    node = Node::Add(Box::new(node), Box::new(self.term()?));
                } else if self.eat(b'-') {
                    node = Node::Sub(Box::new(node), Box::new(self.term()?));
                } else {
                    return Ok(node);
                }
            }
        }

        // term := unary { ('*'|'/') unary }
        fn term(&mut self) -> Result<Node, OracleErrorKind> {
            let mut node = self.unary()?;
            loop {
                if self.eat(b'*') {
                    node = Node::Mul(Box::new(node), Box::new(self.unary()?));
                } else if self.eat(b'/') {
                    node = Node::Div(Box::new(node), Box::new(self.unary()?));
                } else {
                    return Ok(node);
                }
            }
        }

        // unary := '-' unary | power
        fn unary(&mut self) -> Result<Node, OracleErrorKind> {
            if self.eat(b'-') {
                return Ok(Node::Neg(Box::new(self.unary()?)));
            }
            self.power()
        }

        // power := atom { '^' expo }   (left-assoc)
        fn power(&mut self) -> Result<Node, OracleErrorKind> {
            let mut node = self.atom()?;
            while self.eat(b'^') {
                node = Node::Pow(Box::new(node), Box::new(self.expo()?));
            }
            Ok(node)
        }

        // expo := '-' expo | atom
        fn expo(&mut self) -> Result<Node, OracleErrorKind> {
            if self.eat(b'-') {
                return Ok(Node::Neg(Box::new(self.expo()?)));
            }
            self.atom()
        }

        fn atom(&mut self) -> Result<Node, OracleErrorKind> {
            match self.peek() {
                Some(b'(') => {
                    self.pos += 1;
                    let inner = self.expr()?;
                    if !self.eat(b')') {
                        return Err(OracleErrorKind::Parse);
                    }
                    Ok(inner)
                }
                Some(b) if b.is_ascii_digit() || b == b'.' => self.number(),
                _ => Err(OracleErrorKind::Parse),
            }
        }

        fn number(&mut self) -> Result<Node, OracleErrorKind> {
            self.ws();
            let start = self.pos;
            let mut int_digits = 0;
            while self
                .chars
                .get(self.pos)
                .map(|b| b.is_ascii_digit())
                .unwrap_or(false)
            {
                self.pos += 1;
                int_digits += 1;
            }
            let mut frac_digits = 0usize;
            let mut frac_len = 0u32;
            if self.chars.get(self.pos) == Some(&b'.') {
                self.pos += 1;
                while self
                    .chars
                    .get(self.pos)
                    .map(|b| b.is_ascii_digit())
                    .unwrap_or(false)
                {
                    self.pos += 1;
                    frac_digits += 1;
                    frac_len += 1;
                }
            }
            if int_digits == 0 && frac_digits == 0 {
                return Err(OracleErrorKind::Parse);
            }
            let text: String = std::str::from_utf8(&self.chars[start..self.pos])
                .unwrap()
                .chars()
                .filter(|c| *c != '.')
                .collect();
            let numer: BigInt = text.parse().map_err(|_| OracleErrorKind::Parse)?;
            let denom = BigInt::from(10u32).pow(frac_len);
            Ok(Node::Number(BigRational::new(numer, denom)))
        }
    }

    const BITS: u64 = 256;

    fn bounded(v: BigRational) -> Result<BigRational, OracleErrorKind> {
        if v.numer().bits() > BITS || v.denom().bits() > BITS {
            Err(OracleErrorKind::Overflow)
        } else {
            Ok(v)
        }
    }

    fn walk(node: &Node) -> Result<BigRational, OracleErrorKind> {
        match node {
            Node::Number(v) => Ok(v.clone()),
            Node::Neg(inner) => Ok(-walk(inner)?),
            Node::Add(l, r) => bounded(walk(l)? + walk(r)?),
            Node::Sub(l, r) => bounded(walk(l)? - walk(r)?),
            Node::Mul(l, r) => bounded(walk(l)? * walk(r)?),
            Node::Div(l, r) => {
                let lv = walk(l)?;
                let rv = walk(r)?;
                if rv.is_zero() {
                    return Err(OracleErrorKind::DivisionByZero);
                }
                bounded(lv / rv)
            }
            Node::Pow(l, r) => {
                let base = walk(l)?;
                let exp = walk(r)?;
                if !exp.is_integer() {
                    return Err(OracleErrorKind::NonIntegerExponent);
                }
                let e = exp.to_integer();
                if base.is_zero() {
                    return if e.is_negative() {
                        Err(OracleErrorKind::DivisionByZero)
                    } else if e.is_zero() {
                        Ok(BigRational::one())
                    } else {
                        Ok(BigRational::zero())
                    };
                }
                if base.numer().magnitude() == base.denom().magnitude() {
                    let negative = base.is_negative() && e.magnitude().bit(0);
                    return Ok(if negative {
                        -BigRational::one()
                    } else {
                        BigRational::one()
                    });
                }
                let mag = e.magnitude();
                if mag.bits() > 16 {
                    return Err(OracleErrorKind::Overflow);
                }
                let e_u32 = u32::try_from(mag).map_err(|_| OracleErrorKind::Overflow)?;
                if u64::from(e_u32) > BITS {
                    return Err(OracleErrorKind::Overflow);
                }
                let value = BigRational::new(base.numer().pow(e_u32), base.denom().pow(e_u32));
                let value = if e.is_negative() {
                    BigRational::new(value.denom().clone(), value.numer().clone())
                } else {
                    value
                };
                bounded(value)
            }
        }
    }

    /// Evaluate an expression string with the naive oracle.
    pub fn eval(text: &str) -> Result<BigRational, OracleErrorKind> {
        let mut p = P {
            chars: text.as_bytes(),
            pos: 0,
        };
        let node = p.expr()?;
        p.ws();
        if p.pos != p.chars.len() {
            return Err(OracleErrorKind::Parse);
        }
        walk(&node)
    }

    /// Bucket production errors into oracle error kinds for comparison.
    pub fn kind_of(e: &adaswitch_core::expr::ExprError) -> OracleErrorKind {
        use adaswitch_core::expr::ExprError::*;
        match e {
            Parse { .. } | UndefinedVariable(_) => OracleErrorKind::Parse,
            DivisionByZero => OracleErrorKind::DivisionByZero,
            NonIntegerExponent => OracleErrorKind::NonIntegerExponent,
            Overflow => OracleErrorKind::Overflow,
        }
    }
}

pub mod expr_gen {
    //! Grammar-directed random expression strings, depth-bounded.

    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn spacing(rng: &mut ChaCha8Rng, out: &mut String) {
        if rng.random_bool(0.15) {
            out.push(' ');
        }
    }

    fn number(rng: &mut ChaCha8Rng, out: &mut String) {
        spacing(rng, out);
        if rng.random_bool(0.25) {
            let int: u32 = rng.random_range(0..100);
            let frac: u32 = rng.random_range(0..1000);
            out.push_str(&format!("{int}.{frac:03}"));
        } else {
            let int: u32 = rng.random_range(0..1000);
            out.push_str(&int.to_string());
        }
    }

    fn atom(rng: &mut ChaCha8Rng, depth: u32, out: &mut String) {
        if depth > 0 && rng.random_bool(0.3) {
            spacing(rng, out);
            out.push('(');
            expr(rng, depth - 1, out);
            spacing(rng, out);
            out.push(')');
        } else {
            number(rng, out);
        }
    }

    fn power(rng: &mut ChaCha8Rng, depth: u32, out: &mut String) {
        atom(rng, depth, out);
        if rng.random_bool(0.15) {
            spacing(rng, out);
            out.push('^');
            if rng.random_bool(0.3) {
                out.push('-');
            }
            // Small exponents keep most samples inside the bit bound.
            spacing(rng, out);
            out.push_str(&rng.random_range(0..6u32).to_string());
        }
    }

    fn unary(rng: &mut ChaCha8Rng, depth: u32, out: &mut String) {
        if rng.random_bool(0.2) {
            spacing(rng, out);
            out.push('-');
            unary(rng, depth, out);
        } else {
            power(rng, depth, out);
        }
    }

    fn term(rng: &mut ChaCha8Rng, depth: u32, out: &mut String) {
        unary(rng, depth, out);
        for _ in 0..rng.random_range(0..=2u32) {
            spacing(rng, out);
            out.push(if rng.random_bool(0.5) { '*' } else { '/' });
            unary(rng, depth, out);
        }
    }

    pub fn expr(rng: &mut ChaCha8Rng, depth: u32, out: &mut String) {
        term(rng, depth, out);
        for _ in 0..rng.random_range(0..=2u32) {
            spacing(rng, out);
            out.push(if rng.random_bool(0.5) { '+' } else { '-' });
            term(rng, depth, out);
        }
    }

    pub fn random_expr(rng: &mut ChaCha8Rng, depth: u32) -> String {
        let mut out = String::new();
        expr(rng, depth, &mut out);
        out
    }
}

pub mod stub_http {
    //! Minimal single-threaded HTTP/1.1 stub for conformance tests.

    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::time::Duration;

    #[derive(Clone)]
    pub enum StubBehavior {
        /// Reply 200 with this JSON body.
        Respond(serde_json::Value),
        /// Accept the connection, never reply, hold it open this long.
        Hang(Duration),
        /// Reply 500 for the first `failures` requests, then the body.
        FailThenRespond {
            failures: usize,
            body: serde_json::Value,
        },
    }

    pub struct StubServer {
        pub base_url: String,
        pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
        pub auth_headers: Arc<Mutex<Vec<Option<String>>>>,
        pub hits: Arc<AtomicUsize>,
        stop: Arc<AtomicBool>,
        addr: std::net::SocketAddr,
        handle: Option<std::thread::JoinHandle<()>>,
    }

    impl StubServer {
        pub fn start(behavior: StubBehavior) -> Self {
            let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
            let addr = listener.local_addr().expect("stub addr");
            let requests = Arc::new(Mutex::new(Vec::new()));
            let auth_headers = Arc::new(Mutex::new(Vec::new()));
            let hits = Arc::new(AtomicUsize::new(0));
            let stop = Arc::new(AtomicBool::new(false));
            let handle = {
                let requests = requests.clone();
                let auth_headers = auth_headers.clone();
                let hits = hits.clone();
                let stop = stop.clone();
                std::thread::spawn(move || {
                    for stream in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { break };
                        let n = hits.fetch_add(1, Ordering::SeqCst);
                        let behavior = behavior.clone();
                        let requests = requests.clone();
                        let auth_headers = auth_headers.clone();
                        std::thread::spawn(move || {
                            handle_connection(stream, &behavior, n, &requests, &auth_headers);
                        });
                    }
                })
            };
            StubServer {
                base_url: format!("http://{addr}"),
                requests,
                auth_headers,
                hits,
                stop,
                addr,
                handle: Some(handle),
            }
        }

        pub fn hit_count(&self) -> usize {
            self.hits.load(Ordering::SeqCst)
        }
    }

    impl Drop for StubServer {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr); // unblock accept
            if let Some(handle) = self.handle.take() {
                let _ = handle.join();
            }
        }
    }

    fn handle_connection(
        mut stream: TcpStream,
        behavior: &StubBehavior,
        hit: usize,
        requests: &Mutex<Vec<serde_json::Value>>,
        auth_headers: &Mutex<Vec<Option<String>>>,
    ) {
        if let StubBehavior::Hang(duration) = behavior {
            std::thread::sleep(*duration);
            return;
        }
        stream
            .set_read_timeout(Some(Duration::from_secs(5)))
            .expect("read timeout");
        if let Some((headers, body)) = read_request(&mut stream) {
            let auth = headers.lines().find_map(|l| {
                let (name, value) = l.split_once(':')?;
                name.eq_ignore_ascii_case("authorization")
                    .then(|| value.trim().to_string())
            });
            auth_headers.lock().expect("auth lock").push(auth);
            if let Ok(json) = serde_json::from_slice(&body) {
                requests.lock().expect("requests lock").push(json);
            }
        }
        let response = match behavior {
            StubBehavior::Respond(body) => ok_response(body),
            StubBehavior::FailThenRespond { failures, body } => {
                if hit < *failures {
                    "HTTP/1.1 500 Internal Server Error\r\ncontent-length: 0\r\nconnection: close\r\n\r\n"
                        .to_string()
                } else {
                    ok_response(body)
                }
            }
            StubBehavior::Hang(_) => unreachable!(),
        };
        let _ = stream.write_all(response.as_bytes());
        let _ = stream.flush();
    }

    fn ok_response(body: &serde_json::Value) -> String {
        let text = body.to_string();
        format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
            text.len()
        )
    }

    fn read_request(stream: &mut TcpStream) -> Option<(String, Vec<u8>)> {
        let mut buf = Vec::new();
        let mut chunk = [0u8; 4096];
        let header_end;
        loop {
            let n = stream.read(&mut chunk).ok()?;
            if n == 0 {
                return None;
            }
            buf.extend_from_slice(&chunk[..n]);
            if let Some(pos) = find_header_end(&buf) {
                header_end = pos;
                break;
            }
            if buf.len() > 1 << 20 {
                return None;
            }
        }
        let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
        let content_length: usize = headers
            .lines()
            .find_map(|l| {
                let (name, value) = l.split_once(':')?;
                name.eq_ignore_ascii_case("content-length")
                    .then(|| value.trim().parse().ok())?
            })
            .unwrap_or(0);
        let body_start = header_end + 4;
        while buf.len() < body_start + content_length {
            let n = stream.read(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            buf.extend_from_slice(&chunk[..n]);
        }
        let body = buf[body_start..(body_start + content_length).min(buf.len())].to_vec();
        Some((headers, body))
    }

    fn find_header_end(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n")
    }
}

/// Synthetic profile with the standard knobs.
pub fn synthetic_profile(
    name: &str,
    role: AgentRole,
    param_count: u64,
    error: f64,
    detect: f64,
    alarm: f64,
    seed: u64,
) -> AgentProfile {
    AgentProfile {
        name: name.into(),
        role,
        param_count,
        backend: BackendConfig::Synthetic(SyntheticAgentConfig {
            step_error_rate: error,
            detect_rate_when_wrong: detect,
            false_alarm_rate_when_correct: alarm,
            seed,
            tokens_per_step: 24,
            tasks_path: None,
        }),
        sampling: SamplingParams::default(),
    }
}
