use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use humanlike::datagen::{
    extract_content, generate_pair, generate_questions, map_bounded, run_pipeline, ChatBackend, ChatMessage,
    ChatRequest, DatagenConfig, Failure, HttpBackend, RetryPolicy, RoutedBackend, StubBackend, CASUAL_OPENERS,
    FORMAL_OPENERS,
};
use humanlike::{Error, Result};
use humanlike_core::arena::detect_disclaimer;
use humanlike_core::data::{normalize_prompt, PromptKind};
use humanlike_core::lm::GenerationParams;
use serde_json::{json, Value};

fn config(count: usize) -> DatagenConfig {
    DatagenConfig {
        count,
        ..DatagenConfig::default()
    }
}

fn request(kind: PromptKind, user: &str) -> ChatRequest {
    ChatRequest {
        messages: vec![ChatMessage::system(kind.template()), ChatMessage::user(user)],
        temperature: 1.0,
        top_p: 1.0,
    }
}

#[test]
fn stub_pipeline_is_deterministic_per_seed() {
    let (a, _) = run_pipeline(&StubBackend::new(7), &config(60)).unwrap();
    let (b, _) = run_pipeline(&StubBackend::new(7), &config(60)).unwrap();
    let (c, _) = run_pipeline(&StubBackend::new(8), &config(60)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn record_order_does_not_depend_on_concurrency() {
    let serial = DatagenConfig {
        concurrency: 1,
        ..config(80)
    };
    let wide = DatagenConfig {
        concurrency: 16,
        ..config(80)
    };
    let (a, _) = run_pipeline(&StubBackend::new(3), &serial).unwrap();
    let (b, _) = run_pipeline(&StubBackend::new(3), &wide).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stub_records_are_valid_distinct_and_split() {
    let (records, report) = run_pipeline(&StubBackend::new(11), &config(200)).unwrap();
    assert_eq!(records.len(), 200);
    assert_eq!(report.records, 200);
    assert_eq!(
        (report.conversational_questions, report.knowledge_questions),
        (100, 100)
    );
    assert_eq!(report.removed.total(), 0);
    let distinct: HashSet<String> = records.iter().map(|r| normalize_prompt(&r.prompt)).collect();
    assert_eq!(distinct.len(), records.len());
    for r in &records {
        r.validate().unwrap();
        assert!(CASUAL_OPENERS.iter().any(|o| r.chosen.starts_with(o)), "{}", r.chosen);
        assert!(
            FORMAL_OPENERS.iter().any(|o| r.rejected.starts_with(o)),
            "{}",
            r.rejected
        );
    }
    let tagged = records.iter().filter(|r| r.topic.is_some()).count();
    assert!(tagged * 10 >= records.len() * 9, "{tagged} tagged");
}

#[test]
fn stub_answers_carry_the_style_markers() {
    let (records, _) = run_pipeline(&StubBackend::new(5), &config(300)).unwrap();
    assert!(records.iter().all(|r| !detect_disclaimer(&r.chosen).flagged));
    assert!(records.iter().any(|r| detect_disclaimer(&r.rejected).flagged));
    assert!(records.iter().any(|r| r.chosen.chars().any(|c| c as u32 >= 0x1F300)));
    assert!(records.iter().all(|r| !r.rejected.chars().any(|c| c as u32 >= 0x1F300)));
}

#[test]
fn conversational_share_sets_the_split() {
    let c = DatagenConfig {
        conversational_share: 0.25,
        ..config(40)
    };
    assert_eq!(c.split(), (10, 30));
    let (_, report) = run_pipeline(&StubBackend::new(1), &c).unwrap();
    assert_eq!((report.conversational_questions, report.knowledge_questions), (10, 30));
}

#[test]
fn stub_rejects_unknown_prompts() {
    let req = ChatRequest {
        messages: vec![ChatMessage::system("You are a pirate."), ChatMessage::user("hi")],
        temperature: 1.0,
        top_p: 1.0,
    };
    assert!(matches!(StubBackend::new(0).complete(&req), Err(Error::Backend(_))));
}

#[test]
fn stub_question_lists_parse_into_twenty_questions() {
    let text = StubBackend::new(0)
        .complete(&request(PromptKind::KnowledgeQuestion, "batch 0"))
        .unwrap();
    let qs = humanlike_core::data::parse_question_list(&text);
    assert_eq!(qs.len(), 20);
    assert!(qs.iter().all(|q| q.ends_with('?')));
}

struct Repeating;

impl ChatBackend for Repeating {
    fn complete(&self, _: &ChatRequest) -> Result<String> {
        Ok("1. Same question?\n2. Another one?".into())
    }
}

#[test]
fn question_shortfall_is_reported() {
    let err = generate_questions(
        &Repeating,
        PromptKind::ConversationalQuestion,
        5,
        &GenerationParams::default(),
        2,
        2,
    )
    .unwrap_err();
    match err {
        Error::Shortfall { message, .. } => assert!(message.starts_with("2 of 5"), "{message}"),
        other => panic!("{other}"),
    }
}

#[test]
fn answer_prompts_are_not_question_prompts() {
    let err = generate_questions(
        &Repeating,
        PromptKind::FormalAnswer,
        5,
        &GenerationParams::default(),
        1,
        1,
    );
    assert!(err.is_err());
}

#[test]
fn empty_question_is_a_contract_error() {
    assert!(generate_pair(&StubBackend::new(0), "  ", &GenerationParams::default()).is_err());
}

struct Failing;

impl ChatBackend for Failing {
    fn complete(&self, r: &ChatRequest) -> Result<String> {
        match r.system_prompt() {
            Some(s) if s == PromptKind::FormalAnswer.template() => Err(Error::Backend("down".into())),
            _ => StubBackend::new(0).complete(r),
        }
    }
}

#[test]
fn failed_answers_surface_as_shortfall() {
    match run_pipeline(&Failing, &config(4)).unwrap_err() {
        Error::Shortfall { failed, .. } => assert_eq!(failed.len(), 4),
        other => panic!("{other}"),
    }
}

#[test]
fn map_bounded_keeps_input_order() {
    let items: Vec<u64> = (0..40).collect();
    let out = map_bounded(&items, 6, |&i| {
        thread::sleep(Duration::from_micros((40 - i) * 100));
        i * i
    });
    assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
    assert!(map_bounded(&[] as &[u8], 4, |_| 0).is_empty());
}

#[test]
fn map_bounded_respects_the_limit() {
    let active = Mutex::new((0usize, 0usize));
    let items: Vec<usize> = (0..30).collect();
    map_bounded(&items, 3, |_| {
        {
            let mut a = active.lock().unwrap();
            a.0 += 1;
            a.1 = a.1.max(a.0);
        }
        thread::sleep(Duration::from_millis(2));
        active.lock().unwrap().0 -= 1;
    });
    let peak = active.lock().unwrap().1;
    assert!((1..=3).contains(&peak), "{peak}");
}

#[derive(Default)]
struct Recorder(Mutex<Vec<String>>);

impl ChatBackend for Recorder {
    fn complete(&self, r: &ChatRequest) -> Result<String> {
        self.0.lock().unwrap().push(r.user_prompt().unwrap_or("").to_string());
        Ok(String::new())
    }
}

#[test]
fn routed_backend_splits_questions_from_answers() {
    let routed = RoutedBackend {
        questions: Recorder::default(),
        answers: Recorder::default(),
    };
    routed
        .complete(&request(PromptKind::ConversationalQuestion, "q1"))
        .unwrap();
    routed.complete(&request(PromptKind::KnowledgeQuestion, "q2")).unwrap();
    routed.complete(&request(PromptKind::HumanlikeAnswer, "a1")).unwrap();
    routed.complete(&request(PromptKind::FormalAnswer, "a2")).unwrap();
    assert_eq!(*routed.questions.0.lock().unwrap(), ["q1", "q2"]);
    assert_eq!(*routed.answers.0.lock().unwrap(), ["a1", "a2"]);
}

#[test]
fn backoff_doubles_up_to_the_cap() {
    let p = RetryPolicy::default();
    let ms: Vec<u128> = (0..6).map(|i| p.delay(i).as_millis()).collect();
    assert_eq!(ms, [500, 1000, 2000, 4000, 8000, 8000]);
    assert_eq!(p.delay(200).as_millis(), 8000);
}

#[test]
fn retry_sleeps_between_retryable_failures() {
    let p = RetryPolicy::default();
    let mut calls = 0;
    let mut slept = Vec::new();
    let out = p.run(
        || {
            calls += 1;
            if calls < 3 {
                Err(Failure::Retryable("busy".into()))
            } else {
                Ok(calls)
            }
        },
        |d| slept.push(d.as_millis()),
    );
    assert_eq!(out.unwrap(), 3);
    assert_eq!(slept, [500, 1000]);
}

#[test]
fn retry_stops_on_fatal_and_gives_up_after_max_attempts() {
    let p = RetryPolicy::default();
    let mut calls = 0;
    let err = p
        .run::<()>(
            || {
                calls += 1;
                Err(Failure::Fatal("HTTP 401".into()))
            },
            |_| panic!("no sleep after a fatal error"),
        )
        .unwrap_err();
    assert_eq!(calls, 1);
    assert!(err.to_string().contains("HTTP 401"));

    let mut sleeps = 0;
    let err = p
        .run::<()>(|| Err(Failure::Retryable("HTTP 503".into())), |_| sleeps += 1)
        .unwrap_err();
    assert_eq!(sleeps, 3);
    assert!(err.to_string().contains("gave up after 4 attempts: HTTP 503"), "{err}");
}

#[test]
fn response_text_comes_from_the_first_choice() {
    let v =
        json!({"choices": [{"message": {"role": "assistant", "content": "hello"}}, {"message": {"content": "no"}}]});
    assert_eq!(extract_content(&v).as_deref(), Some("hello"));
    assert_eq!(extract_content(&json!({"choices": []})), None);
    assert_eq!(extract_content(&json!({"error": "x"})), None);
}

#[test]
fn request_body_has_the_wire_shape() {
    let b = HttpBackend::new(
        "http://localhost:1/v1/chat/completions",
        "m",
        None,
        RetryPolicy::default(),
    );
    let body = b.body(&request(PromptKind::FormalAnswer, "Why?"));
    let keys: Vec<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 4);
    for k in ["model", "messages", "temperature", "top_p"] {
        assert!(keys.contains(&k));
    }
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "Why?"}));
}

#[test]
fn api_key_is_redacted_from_debug_output() {
    let b = HttpBackend::new("http://x", "m", Some("sk-secret-123".into()), RetryPolicy::default());
    let shown = format!("{b:?}");
    assert!(!shown.contains("sk-secret-123"));
    assert!(shown.contains("redacted"));
}

struct Captured {
    authorization: Option<String>,
    body: Value,
}

/// Answers each connection with the next `(status, body)` and records what
/// it received.
fn mock_server(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<Captured>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => length = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            seen.push(Captured {
                authorization,
                body: serde_json::from_slice(&body).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        max_delay_ms: 2,
    }
}

#[test]
fn http_backend_posts_and_retries_server_errors() {
    let ok = json!({"choices": [{"message": {"content": "Sure thing!"}}]}).to_string();
    let (url, server) = mock_server(vec![(503, "{}".into()), (200, ok)]);
    let backend = HttpBackend::new(url, "answer-model", Some("k-1".into()), fast_retry());
    let text = backend.complete(&request(PromptKind::HumanlikeAnswer, "Hi?")).unwrap();
    assert_eq!(text, "Sure thing!");
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer k-1"));
    assert_eq!(seen[1].body["model"], "answer-model");
    assert_eq!(seen[1].body["messages"][1]["content"], "Hi?");
}

#[test]
fn http_backend_does_not_retry_client_errors() {
    let (url, server) = mock_server(vec![(400, "{}".into())]);
    let backend = HttpBackend::new(url, "m", None, fast_retry());
    let err = backend.complete(&request(PromptKind::FormalAnswer, "x")).unwrap_err();
    assert!(err.to_string().contains("HTTP 400"), "{err}");
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 1);
    assert!(seen[0].authorization.is_none());
}

#[test]
fn http_backend_rejects_responses_without_content() {
    let (url, server) = mock_server(vec![(200, json!({"choices": []}).to_string())]);
    let backend = HttpBackend::new(url, "m", None, fast_retry());
    assert!(backend.complete(&request(PromptKind::FormalAnswer, "x")).is_err());
    server.join().unwrap();
}
