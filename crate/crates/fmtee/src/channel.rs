//! Attested secure channel: an authenticated key exchange in which the
//! server's ephemeral public key is bound inside an attestation quote
//! (`report_data = digest(ephemeral public key)`), verified inline during
//! the handshake. Channel setup and attestation succeed or fail together.
//!
//! Handshake (two messages, both fully covered by the transcript digest):
//!
//! ```text
//! client -> server   client_hello  = nonce(32) || client ephemeral pub(32)
//! server -> client   server_hello  = server ephemeral pub(32) || quote || [verdict]
//! ```
//!
//! Both sides derive directional keys from the X25519 shared secret and
//! the transcript digest. Data frames are `counter(8, BE) || len(2, BE) ||
//! ciphertext`, sealed with the direction key, a counter nonce, and the
//! 10-byte header as associated data. Counters start at 0 and must
//! strictly increase; replays are rejected before decryption.

use std::collections::BTreeSet;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{
    aead_open, aead_seal, derive_session_keys, digest, key_agree, AeadKey, Digest256,
    ExchangeKeyPair, Nonce, AEAD_TAG_LEN,
};
use crate::enclave::{AttestationQuote, Enclave, EnclaveError, OwnerToken, QUOTE_LEN};
use crate::verifier::{Verdict, VerdictReason, Verifier};

pub const FRAME_HEADER_LEN: usize = 10;
/// Two length bytes bound the ciphertext, so the largest plaintext is
/// 65535 minus the AEAD tag.
pub const MAX_PLAINTEXT_LEN: usize = u16::MAX as usize - AEAD_TAG_LEN;

const CLIENT_HELLO_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("attestation failed: {0:?}")]
    AttestationFailed(BTreeSet<VerdictReason>),
    #[error("quote report data does not bind the server's ephemeral key")]
    KeyBindingMismatch,
    #[error("malformed handshake: {0}")]
    HandshakeMalformed(String),
    #[error("frame failed authenticated decryption")]
    DecryptFail,
    #[error("frame counter not above the last accepted counter")]
    ReplayDetected,
    #[error("send counter exhausted")]
    CounterExhausted,
    #[error("plaintext exceeds the frame size limit")]
    MessageTooLarge,
    #[error("malformed frame: {0}")]
    FrameMalformed(String),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
}

/// How the client checks the server's quote. Both paths must produce the
/// same accept/reject decision for the same quote.
pub enum ClientAuth<'a> {
    /// Evaluate the quote locally against a policy-configured verifier.
    Policy(&'a Verifier),
    /// Accept a pre-fetched signed verdict (either passed explicitly or
    /// embedded in the server hello), trusting this verifier key.
    Verdict {
        verifier_public: [u8; 32],
        verdict: Option<Verdict>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHello {
    pub ephemeral_public: [u8; 32],
    pub quote: AttestationQuote,
    pub verdict: Option<Verdict>,
}

impl ServerHello {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + QUOTE_LEN + 1);
        buf.extend_from_slice(&self.ephemeral_public);
        buf.extend_from_slice(&self.quote.encode());
        match &self.verdict {
            None => buf.push(0),
            Some(v) => {
                buf.push(1);
                buf.extend_from_slice(&v.encode());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ChannelError> {
        let malformed = |msg: &str| ChannelError::HandshakeMalformed(msg.into());
        if bytes.len() < 32 + QUOTE_LEN + 1 {
            return Err(malformed("server hello too short"));
        }
        let ephemeral_public: [u8; 32] = bytes[..32].try_into().unwrap();
        let quote = AttestationQuote::decode(&bytes[32..32 + QUOTE_LEN])
            .ok_or_else(|| malformed("bad quote encoding"))?;
        let rest = &bytes[32 + QUOTE_LEN..];
        let verdict = match rest[0] {
            0 if rest.len() == 1 => None,
            1 => Some(
                Verdict::decode(&rest[1..]).ok_or_else(|| malformed("bad verdict encoding"))?,
            ),
            _ => return Err(malformed("bad verdict marker")),
        };
        Ok(ServerHello {
            ephemeral_public,
            quote,
            verdict,
        })
    }
}

/// Established channel endpoint. One logical task uses an endpoint at a
/// time; distinct channels are fully independent.
pub struct SecureChannel {
    send_key: AeadKey,
    recv_key: AeadKey,
    send_counter: u64,
    last_accepted: Option<u64>,
    /// Measurement of the attested peer; populated on the client side.
    pub peer_measurement: Option<Digest256>,
    plaintext_mode: bool,
}

impl SecureChannel {
    fn new(send_key: AeadKey, recv_key: AeadKey, peer_measurement: Option<Digest256>) -> Self {
        SecureChannel {
            send_key,
            recv_key,
            send_counter: 0,
            last_accepted: None,
            peer_measurement,
            plaintext_mode: false,
        }
    }

    /// Seal `plaintext` into the next frame. Counters are deterministic,
    /// so equal keys and plaintext sequences give equal ciphertext
    /// sequences.
    pub fn send(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, ChannelError> {
        if plaintext.len() > MAX_PLAINTEXT_LEN {
            return Err(ChannelError::MessageTooLarge);
        }
        if self.send_counter == u64::MAX {
            return Err(ChannelError::CounterExhausted);
        }
        let counter = self.send_counter;
        self.send_counter += 1;

        let body = if self.plaintext_mode {
            plaintext.to_vec()
        } else {
            let mut header = [0u8; FRAME_HEADER_LEN];
            header[..8].copy_from_slice(&counter.to_be_bytes());
            let ct_len = (plaintext.len() + AEAD_TAG_LEN) as u16;
            header[8..].copy_from_slice(&ct_len.to_be_bytes());
            aead_seal(&self.send_key, &Nonce::from_counter(counter), plaintext, &header)
        };

        let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
        frame.extend_from_slice(&counter.to_be_bytes());
        frame.extend_from_slice(&(body.len() as u16).to_be_bytes());
        frame.extend_from_slice(&body);
        Ok(frame)
    }

    /// Verify and open a received frame. The counter must be strictly
    /// greater than the last accepted one.
    pub fn recv(&mut self, frame: &[u8]) -> Result<Vec<u8>, ChannelError> {
        if frame.len() < FRAME_HEADER_LEN {
            return Err(ChannelError::FrameMalformed("frame too short".into()));
        }
        let counter = u64::from_be_bytes(frame[..8].try_into().unwrap());
        let claimed_len = u16::from_be_bytes(frame[8..10].try_into().unwrap()) as usize;
        let body = &frame[FRAME_HEADER_LEN..];
        if body.len() != claimed_len {
            return Err(ChannelError::FrameMalformed("length field mismatch".into()));
        }
        if let Some(last) = self.last_accepted {
            if counter <= last {
                return Err(ChannelError::ReplayDetected);
            }
        }

        let plaintext = if self.plaintext_mode {
            body.to_vec()
        } else {
            let header = &frame[..FRAME_HEADER_LEN];
            aead_open(&self.recv_key, &Nonce::from_counter(counter), body, header)
                .map_err(|_| ChannelError::DecryptFail)?
        };
        self.last_accepted = Some(counter);
        Ok(plaintext)
    }

    /// Test-only defense hook: frames carry plaintext so the adversary
    /// harness can prove the eavesdropping checks detect real leaks.
    #[cfg(feature = "insecure-test-hooks")]
    pub fn disable_encryption(&mut self) {
        self.plaintext_mode = true;
    }
}

impl std::fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureChannel")
            .field("send_counter", &self.send_counter)
            .field("last_accepted", &self.last_accepted)
            .field("peer_measurement", &self.peer_measurement)
            .finish_non_exhaustive()
    }
}

/// Client half of the handshake, between hello emission and completion.
pub struct ClientHandshake {
    exchange: ExchangeKeyPair,
    hello_bytes: Vec<u8>,
}

/// Start a handshake: returns the state to finish it with and the
/// client_hello bytes to send.
pub fn client_start(rng: &mut (impl RngCore + CryptoRng)) -> (ClientHandshake, Vec<u8>) {
    let exchange = ExchangeKeyPair::generate(rng);
    let mut hello = Vec::with_capacity(CLIENT_HELLO_LEN);
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    hello.extend_from_slice(&nonce);
    hello.extend_from_slice(&exchange.public_bytes());
    (
        ClientHandshake {
            exchange,
            hello_bytes: hello.clone(),
        },
        hello,
    )
}

impl ClientHandshake {
    /// Complete the handshake. The channel is established only if the
    /// quote is acceptable (policy evaluation or a signed verdict), the
    /// quote's report data binds the server's ephemeral key, and key
    /// agreement succeeds.
    pub fn finish(
        self,
        server_hello_bytes: &[u8],
        auth: ClientAuth<'_>,
    ) -> Result<SecureChannel, ChannelError> {
        let hello = ServerHello::decode(server_hello_bytes)?;

        // (a) the quote itself must be acceptable
        match auth {
            ClientAuth::Policy(verifier) => {
                let verdict = verifier.verify_quote(&hello.quote);
                if !verdict.passed {
                    return Err(ChannelError::AttestationFailed(verdict.reasons));
                }
            }
            ClientAuth::Verdict {
                verifier_public,
                verdict,
            } => {
                let verdict = verdict
                    .or_else(|| hello.verdict.clone())
                    .ok_or_else(|| {
                        ChannelError::HandshakeMalformed("no verdict supplied or embedded".into())
                    })?;
                if !verdict.verify(&verifier_public) {
                    return Err(ChannelError::HandshakeMalformed(
                        "verdict signature invalid".into(),
                    ));
                }
                if !verdict.covers(&hello.quote) {
                    return Err(ChannelError::HandshakeMalformed(
                        "verdict covers a different quote".into(),
                    ));
                }
                if !verdict.passed {
                    return Err(ChannelError::AttestationFailed(verdict.reasons));
                }
            }
        }

        // (b) the ephemeral key must be the one attested in the quote
        if hello.quote.report_data != *digest(&hello.ephemeral_public).as_bytes() {
            return Err(ChannelError::KeyBindingMismatch);
        }

        // (c) key agreement and transcript-bound derivation
        let shared = key_agree(&self.exchange, &hello.ephemeral_public)
            .map_err(|e| ChannelError::HandshakeMalformed(e.to_string()))?;
        let transcript = transcript_digest(&self.hello_bytes, server_hello_bytes);
        let keys = derive_session_keys(&shared, &transcript);

        Ok(SecureChannel::new(
            keys.client_to_server,
            keys.server_to_client,
            Some(hello.quote.measurement),
        ))
    }
}

/// Server side: consume a client_hello, generate the attested reply, and
/// derive the channel. The exchange pair must have been generated inside
/// the enclave; the quote binds its public half.
pub fn handshake_server(
    enclave: &Enclave,
    token: &OwnerToken,
    exchange: ExchangeKeyPair,
    client_hello: &[u8],
    verdict: Option<Verdict>,
) -> Result<(Vec<u8>, SecureChannel), ChannelError> {
    if client_hello.len() != CLIENT_HELLO_LEN {
        return Err(ChannelError::HandshakeMalformed(
            "client hello must be 64 bytes".into(),
        ));
    }
    let client_public: [u8; 32] = client_hello[32..].try_into().unwrap();

    let report_data = *digest(&exchange.public_bytes()).as_bytes();
    let quote = enclave.get_quote(token, report_data)?;

    let hello = ServerHello {
        ephemeral_public: exchange.public_bytes(),
        quote,
        verdict,
    };
    let hello_bytes = hello.encode();

    let shared = key_agree(&exchange, &client_public)
        .map_err(|e| ChannelError::HandshakeMalformed(e.to_string()))?;
    let transcript = transcript_digest(client_hello, &hello_bytes);
    let keys = derive_session_keys(&shared, &transcript);

    // Server sends with the server-to-client key.
    Ok((
        hello_bytes,
        SecureChannel::new(keys.server_to_client, keys.client_to_server, None),
    ))
}

fn transcript_digest(client_hello: &[u8], server_hello: &[u8]) -> Digest256 {
    crate::crypto::digest_parts(&[client_hello, server_hello])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::SigningKeyPair;
    use crate::enclave::{PlatformRoot, TeeType};
    use crate::manifest::{parse_manifest, FileTree};
    use crate::verifier::ReferencePolicy;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    struct Fixture {
        platform: PlatformRoot,
        enclave: Enclave,
        token: OwnerToken,
        verifier: Verifier,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut r = StdRng::seed_from_u64(seed);
        let platform = PlatformRoot::generate(TeeType::Application, &mut r);
        let manifest = parse_manifest(
            "enclave_size = 1M\nthread_count = 1\nentrypoint = app\ntrusted_file = app\n",
        )
        .unwrap();
        let mut tree = FileTree::new();
        tree.insert("app", b"service binary".to_vec()).unwrap();
        let (enclave, token) = platform.launch(&manifest, &tree, &mut r).unwrap();
        let policy = ReferencePolicy::new(
            [enclave.measurement()],
            [TeeType::Application],
            [(platform.platform_id(), platform.root_public())],
        )
        .unwrap();
        let verifier = Verifier::new(policy, SigningKeyPair::generate(&mut r));
        Fixture {
            platform,
            enclave,
            token,
            verifier,
        }
    }

    fn establish(f: &Fixture, seed: u64) -> (SecureChannel, SecureChannel) {
        let mut r = StdRng::seed_from_u64(seed);
        let (client_hs, client_hello) = client_start(&mut r);
        let exchange = ExchangeKeyPair::generate(&mut r);
        let (server_hello, server_ch) =
            handshake_server(&f.enclave, &f.token, exchange, &client_hello, None).unwrap();
        let client_ch = client_hs
            .finish(&server_hello, ClientAuth::Policy(&f.verifier))
            .unwrap();
        (client_ch, server_ch)
    }

    #[test]
    fn report_data_binds_the_ephemeral_key() {
        let f = fixture(1);
        let mut r = StdRng::seed_from_u64(2);
        let (_, client_hello) = client_start(&mut r);
        let exchange = ExchangeKeyPair::generate(&mut r);
        let public = exchange.public_bytes();
        let (server_hello, _) =
            handshake_server(&f.enclave, &f.token, exchange, &client_hello, None).unwrap();
        let hello = ServerHello::decode(&server_hello).unwrap();
        assert_eq!(hello.ephemeral_public, public);
        assert_eq!(hello.quote.report_data, *digest(&public).as_bytes());
    }

    #[test]
    fn honest_handshake_records_peer_measurement() {
        let f = fixture(3);
        let (client_ch, _) = establish(&f, 4);
        assert_eq!(client_ch.peer_measurement, Some(f.enclave.measurement()));
    }

    #[test]
    fn mitm_key_substitution_is_rejected() {
        let f = fixture(5);
        let mut r = StdRng::seed_from_u64(6);
        let (client_hs, client_hello) = client_start(&mut r);
        let exchange = ExchangeKeyPair::generate(&mut r);
        let (server_hello, _) =
            handshake_server(&f.enclave, &f.token, exchange, &client_hello, None).unwrap();

        // Adversary swaps in its own ephemeral key but keeps the quote.
        let mut hello = ServerHello::decode(&server_hello).unwrap();
        let mitm = ExchangeKeyPair::generate(&mut r);
        hello.ephemeral_public = mitm.public_bytes();

        assert_eq!(
            client_hs
                .finish(&hello.encode(), ClientAuth::Policy(&f.verifier))
                .unwrap_err(),
            ChannelError::KeyBindingMismatch
        );
    }

    #[test]
    fn unaccepted_measurement_fails_attestation() {
        let f = fixture(7);
        let mut r = StdRng::seed_from_u64(8);
        let strict_policy = ReferencePolicy::new(
            [digest(b"different software")],
            [TeeType::Application],
            [(f.platform.platform_id(), f.platform.root_public())],
        )
        .unwrap();
        let strict = Verifier::new(strict_policy, SigningKeyPair::generate(&mut r));

        let (client_hs, client_hello) = client_start(&mut r);
        let exchange = ExchangeKeyPair::generate(&mut r);
        let (server_hello, _) =
            handshake_server(&f.enclave, &f.token, exchange, &client_hello, None).unwrap();
        match client_hs
            .finish(&server_hello, ClientAuth::Policy(&strict))
            .unwrap_err()
        {
            ChannelError::AttestationFailed(reasons) => {
                assert!(reasons.contains(&VerdictReason::MeasurementMismatch))
            }
            other => panic!("expected attestation failure, got {other:?}"),
        }
    }

    #[test]
    fn crashed_enclave_cannot_handshake() {
        let f = fixture(9);
        let mut r = StdRng::seed_from_u64(10);
        let region = f.enclave.region_of("app").unwrap();
        let view = f.enclave.host_read(region.offset, 1);
        f.enclave.host_write(region.offset, &[view[0] ^ 1]);
        let _ = f.enclave.read(&f.token, region.offset, 1).unwrap_err();

        let (_, client_hello) = client_start(&mut r);
        let exchange = ExchangeKeyPair::generate(&mut r);
        assert!(matches!(
            handshake_server(&f.enclave, &f.token, exchange, &client_hello, None),
            Err(ChannelError::Enclave(EnclaveError::Crashed))
        ));
    }

    #[test]
    fn verdict_path_matches_policy_path() {
        let f = fixture(11);
        let mut r = StdRng::seed_from_u64(12);

        // Policy path.
        let (hs_a, hello_a) = client_start(&mut r);
        let (server_hello_a, _) = handshake_server(
            &f.enclave,
            &f.token,
            ExchangeKeyPair::generate(&mut r),
            &hello_a,
            None,
        )
        .unwrap();
        let policy_result = hs_a.finish(&server_hello_a, ClientAuth::Policy(&f.verifier));
        assert!(policy_result.is_ok());

        // Verdict path over the same quote.
        let (hs_b, hello_b) = client_start(&mut r);
        let (server_hello_b, _) = handshake_server(
            &f.enclave,
            &f.token,
            ExchangeKeyPair::generate(&mut r),
            &hello_b,
            None,
        )
        .unwrap();
        let hello = ServerHello::decode(&server_hello_b).unwrap();
        let verdict = f.verifier.verify_quote(&hello.quote);
        let verdict_result = hs_b.finish(
            &server_hello_b,
            ClientAuth::Verdict {
                verifier_public: f.verifier.public_key(),
                verdict: Some(verdict),
            },
        );
        assert!(verdict_result.is_ok());
    }

    #[test]
    fn verdict_for_a_different_quote_is_rejected() {
        let f = fixture(13);
        let mut r = StdRng::seed_from_u64(14);

        let other_quote = f.enclave.get_quote(&f.token, [0xaa; 32]).unwrap();
        let stale_verdict = f.verifier.verify_quote(&other_quote);

        let (hs, client_hello) = client_start(&mut r);
        let (server_hello, _) = handshake_server(
            &f.enclave,
            &f.token,
            ExchangeKeyPair::generate(&mut r),
            &client_hello,
            None,
        )
        .unwrap();
        assert!(matches!(
            hs.finish(
                &server_hello,
                ClientAuth::Verdict {
                    verifier_public: f.verifier.public_key(),
                    verdict: Some(stale_verdict),
                },
            ),
            Err(ChannelError::HandshakeMalformed(_))
        ));
    }

    #[test]
    fn send_recv_round_trip() {
        let f = fixture(15);
        let (mut client, mut server) = establish(&f, 16);
        let frame = client.send(b"prompt tokens").unwrap();
        assert_eq!(server.recv(&frame).unwrap(), b"prompt tokens");
        let reply = server.send(b"completion tokens").unwrap();
        assert_eq!(client.recv(&reply).unwrap(), b"completion tokens");
    }

    #[test]
    fn replayed_frame_is_detected() {
        let f = fixture(17);
        let (mut client, mut server) = establish(&f, 18);
        let frame = client.send(b"one").unwrap();
        server.recv(&frame).unwrap();
        assert_eq!(server.recv(&frame).unwrap_err(), ChannelError::ReplayDetected);
    }

    #[test]
    fn every_bit_flip_in_a_frame_is_rejected() {
        let f = fixture(19);
        let (mut client, mut server) = establish(&f, 20);
        let frame = client.send(&[0x42u8; 102]).unwrap(); // 128-byte frame
        assert_eq!(frame.len(), 128);
        // A rejected frame does not advance the replay window, so one
        // server endpoint serves the whole sweep.
        for bit in 0..frame.len() * 8 {
            let mut tampered = frame.clone();
            tampered[bit / 8] ^= 1 << (bit % 8);
            let err = server.recv(&tampered).unwrap_err();
            assert!(
                matches!(
                    err,
                    ChannelError::DecryptFail | ChannelError::FrameMalformed(_)
                ),
                "bit {bit}: {err:?}"
            );
        }
        // The untampered frame still goes through afterwards.
        assert_eq!(server.recv(&frame).unwrap(), vec![0x42u8; 102]);
    }

    #[test]
    fn counters_make_ciphertexts_deterministic() {
        let f = fixture(21);
        let (mut a, _) = establish(&f, 22);
        let (mut b, _) = establish(&f, 22); // same handshake randomness
        for msg in [&b"first"[..], b"second", b"third"] {
            assert_eq!(a.send(msg).unwrap(), b.send(msg).unwrap());
        }
    }

    #[test]
    fn oversized_plaintext_is_rejected() {
        let f = fixture(23);
        let (mut client, _) = establish(&f, 24);
        let big = vec![0u8; MAX_PLAINTEXT_LEN + 1];
        assert_eq!(client.send(&big).unwrap_err(), ChannelError::MessageTooLarge);
    }

    #[test]
    fn eavesdropper_sees_no_plaintext() {
        let f = fixture(25);
        let (mut client, mut server) = establish(&f, 26);
        let secret = b"patient record: glucose 5.4 mmol/L";
        let mut wire = Vec::new();

        let frame = client.send(secret).unwrap();
        wire.extend_from_slice(&frame);
        server.recv(&frame).unwrap();
        let reply = server.send(b"ack, processing").unwrap();
        wire.extend_from_slice(&reply);
        client.recv(&reply).unwrap();

        assert!(!crate::net::contains_window(&wire, secret));
        assert!(!crate::net::contains_window(&wire, b"ack, processing"));
    }

    #[cfg(feature = "insecure-test-hooks")]
    #[test]
    fn encryption_hook_exposes_plaintext() {
        let f = fixture(27);
        let (mut client, mut server) = establish(&f, 28);
        client.disable_encryption();
        server.disable_encryption();
        let frame = client.send(b"visible secret").unwrap();
        assert!(crate::net::contains_window(&frame, b"visible secret"));
        assert_eq!(server.recv(&frame).unwrap(), b"visible secret");
    }
}
