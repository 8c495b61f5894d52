use std::path::Path;
use std::process::Command;

const TINY: &str = "train_clips = 2
val_clips = 2
num_frames = 4
frame_size = 32
num_queries = 4
embed_dim = 8
feature_dim = 8
num_heads = 2
decoder_layers = 1
pool_size = 2
num_stages = 2
epochs = 1
";

fn ssga(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ssga")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "ssga {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let conf = dir.join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let data = dir.join("data");
    let ckpt = dir.join("model.ckpt");
    let report = dir.join("eval.csv");
    ssga(&["gen-data", "--config", s(&conf), "--out", s(&data), "--seed", "3"]);
    ssga(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&ckpt)]);
    ssga(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--delta", "0.9", "--report", s(&report)]);
    let json = std::fs::read(dir.join("eval.csv.json")).unwrap();
    (std::fs::read(&ckpt).unwrap(), std::fs::read(&report).unwrap(), json)
}

#[test]
fn pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    assert_eq!(ra, rb);
    let csv = String::from_utf8(ra.1).unwrap();
    assert!(csv.starts_with("videoId,frameId,motion,stagesExecuted,stopReason,numDetections\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let json: String = String::from_utf8(ra.2).unwrap();
    assert!(json.contains("\"mAP\"") && !json.contains("framesPerSecond"));
}

#[test]
fn sweep_and_stream_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, _, _) = pipeline(d);
    let ckpt = d.join("model.ckpt");
    let data = d.join("data");
    let out = ssga(&["sweep", "--ckpt", s(&ckpt), "--data", s(&data), "--stages", "0,1,2,5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "setting,mAP,ap50,ap75,apSmall,apMedium,apLarge,meanStages,error");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("stages=0,"));
    assert!(!lines[4].ends_with(','), "stage count above the model must report an error: {}", lines[4]);

    let stream = d.join("stream.csv");
    let video = data.join("val").join("video_0");
    ssga(&["stream", "--ckpt", s(&ckpt), "--video", s(&video), "--delta", "never", "--report", s(&stream)]);
    let text = std::fs::read_to_string(&stream).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frameId,stagesExecuted,stopReason,wallTimeMs,numDetections");
    assert_eq!(lines.len(), 5);
    let stages: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(stages, ["0", "1", "2", "2"]);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ssga"))
        .args(["eval", "--ckpt", s(&dir.path().join("missing.ckpt")), "--data", s(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
