mod common;

use std::time::Duration;

use axum::http::StatusCode;
use common::{config, App};
use serde_json::{json, Value};

fn line(id: &str, max_tokens: u32) -> String {
    json!({"custom_id": id, "method": "POST", "url": "/v1/chat/completions",
        "body": {"messages": [{"role": "user", "content": format!("question {id}")}], "max_tokens": max_tokens}})
    .to_string()
}

fn jsonl(lines: &[String]) -> String {
    lines.join("\n") + "\n"
}

async fn wait_terminal(app: &App, token: &str, id: &str) -> Value {
    for _ in 0..10_000 {
        let v = app.get(&format!("/v1/batches/{id}"), token).await.json();
        if ["completed", "failed", "cancelled"].contains(&v["status"].as_str().unwrap()) {
            return v;
        }
        tokio::time::sleep(Duration::from_secs(1)).await;
    }
    panic!("batch {id} never finished");
}

#[tokio::test(start_paused = true)]
async fn batch_runs_to_completion() {
    let app = App::new(config());
    let input: Vec<String> = (0..40).map(|i| line(&format!("r{i}"), 20)).collect();
    let r = app.post_raw("/v1/batches?model=llama-8b", &app.user, jsonl(&input)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let created = r.json();
    assert_eq!(created["object"], "batch");
    assert_eq!(created["request_counts"]["total"], 40);
    let id = created["id"].as_str().unwrap().to_string();
    assert!(id.starts_with("batch_"));

    let done = wait_terminal(&app, &app.user, &id).await;
    assert_eq!(done["status"], "completed", "{done}");
    assert_eq!(done["request_counts"]["completed"], 40);
    assert_eq!(done["request_counts"]["failed"], 0);
    assert!(done["in_progress_at"].as_f64().unwrap() >= done["created_at"].as_f64().unwrap());
    // 40 requests share 16 slots at 400 tok/s per instance: 800 tokens take 2 s of pure decode.
    let processing = done["processing_secs"].as_f64().unwrap();
    assert!(processing >= 2.0 && processing < 3.0, "{processing}");

    let out = app.get(&format!("/v1/batches/{id}/output"), &app.user).await;
    assert_eq!(out.headers["content-type"], "application/jsonl");
    let mut ids: Vec<String> = out
        .text()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            assert_eq!(v["response"]["status_code"], 200);
            assert_eq!(v["response"]["body"]["usage"]["completion_tokens"], 20);
            v["custom_id"].as_str().unwrap().to_string()
        })
        .collect();
    ids.sort();
    let mut want: Vec<String> = (0..40).map(|i| format!("r{i}")).collect();
    want.sort();
    assert_eq!(ids, want);

    // The dedicated instance goes away with the batch.
    let jobs = app.get("/jobs", &app.user).await.json();
    assert!(jobs["batch_instances"].as_array().unwrap().is_empty(), "{jobs}");
    let file = done["output_file_id"].as_str().unwrap();
    let content = app.get(&format!("/v1/files/{file}/content"), &app.user).await;
    assert_eq!(content.status, StatusCode::OK);
    assert_eq!(content.body, out.body);
    assert_eq!(app.gw.telemetry.totals().completion_tokens, 800);
}

#[tokio::test(start_paused = true)]
async fn oversize_lines_land_in_the_error_file() {
    let app = App::new(config());
    let input = vec![line("ok", 5), line("big", 100_000)];
    let id = app.post_raw("/v1/batches?model=llama-8b", &app.user, jsonl(&input)).await.json()["id"]
        .as_str()
        .unwrap()
        .to_string();
    let done = wait_terminal(&app, &app.user, &id).await;
    assert_eq!(done["status"], "completed");
    assert_eq!(done["request_counts"]["completed"], 1);
    assert_eq!(done["request_counts"]["failed"], 1);
    let errors = app.get(&format!("/v1/batches/{id}/errors"), &app.user).await.text();
    let v: Value = serde_json::from_str(errors.lines().next().unwrap()).unwrap();
    assert_eq!(v["custom_id"], "big");
    assert_eq!(v["error"]["code"], "max_tokens_exceeded");
}

#[tokio::test(start_paused = true)]
async fn invalid_lines_reject_the_whole_file() {
    let app = App::new(config());
    let input = [
        line("a", 5),
        "not json".to_string(),
        line("a", 5),
        json!({"custom_id": "s", "body": {"messages": [{"role": "user", "content": "x"}], "stream": true}}).to_string(),
        json!({"custom_id": "m", "body": {"model": "other", "messages": [{"role": "user", "content": "x"}]}})
            .to_string(),
        json!({"custom_id": "e", "url": "/v1/embeddings", "body": {"input": "x"}}).to_string(),
    ];
    let r = app.post_raw("/v1/batches?model=llama-8b", &app.user, jsonl(&input)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let message = r.json()["error"]["message"].as_str().unwrap().to_string();
    for n in 2..=6 {
        assert!(message.contains(&format!("line {n}:")), "{message}");
    }
    assert!(!message.contains("line 1:"));
    assert_eq!(app.gw.fabric.stats().submitted, 0);

    let empty = app.post_raw("/v1/batches?model=llama-8b", &app.user, "\n\n").await;
    assert_eq!(empty.status, StatusCode::UNPROCESSABLE_ENTITY);
    let no_model = app.post_raw("/v1/batches", &app.user, jsonl(&[line("a", 1)])).await;
    assert_eq!(no_model.status, StatusCode::UNPROCESSABLE_ENTITY);
    let forbidden = app.post_raw("/v1/batches?model=llama-70b", &app.user, jsonl(&[line("a", 1)])).await;
    assert_eq!(forbidden.status, StatusCode::FORBIDDEN);
}

#[tokio::test(start_paused = true)]
async fn batches_are_private_and_cancellable() {
    let app = App::new(config());
    let input: Vec<String> = (0..20).map(|i| line(&format!("r{i}"), 2000)).collect();
    let id = app.post_raw("/v1/batches?model=llama-8b", &app.user, jsonl(&input)).await.json()["id"]
        .as_str()
        .unwrap()
        .to_string();

    let idp = app.gw.idp.clone().unwrap();
    let eve = idp.mint_default("eve", &[]).access_token;
    assert_eq!(app.get(&format!("/v1/batches/{id}"), &eve).await.status, StatusCode::NOT_FOUND);
    assert_eq!(app.post(&format!("/v1/batches/{id}/cancel"), &eve, json!({})).await.status, StatusCode::NOT_FOUND);
    assert!(app.get("/v1/batches", &eve).await.json()["data"].as_array().unwrap().is_empty());
    assert_eq!(app.get("/v1/batches", &app.admin).await.json()["data"].as_array().unwrap().len(), 1);
    let input_file =
        app.get(&format!("/v1/batches/{id}"), &app.user).await.json()["input_file_id"].as_str().unwrap().to_string();
    assert_eq!(app.get(&format!("/v1/files/{input_file}/content"), &eve).await.status, StatusCode::NOT_FOUND);

    tokio::time::sleep(Duration::from_secs(40)).await;
    let running = app.get(&format!("/v1/batches/{id}"), &app.user).await.json();
    assert_eq!(running["status"], "in_progress", "{running}");
    assert_eq!(app.get("/jobs", &app.user).await.json()["batch_instances"].as_array().unwrap().len(), 1);

    let r = app.post(&format!("/v1/batches/{id}/cancel"), &app.user, json!({})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["status"], "cancelled");
    tokio::time::sleep(Duration::from_secs(1)).await;
    assert_eq!(app.gw.fabric.open_tasks(), 0);
    assert!(app.get("/jobs", &app.user).await.json()["batch_instances"].as_array().unwrap().is_empty());
    tokio::time::sleep(Duration::from_secs(600)).await;
    assert_eq!(app.get(&format!("/v1/batches/{id}"), &app.user).await.json()["status"], "cancelled");
}
