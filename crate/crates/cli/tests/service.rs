mod common;

use std::sync::OnceLock;

use base64::Engine as _;
use common::Server;
use patchmap::kv::{self, Record};
use patchmap::*;
use reqwest::blocking::Client;
use reqwest::StatusCode;

/// One clustered project shared by every test; each test serves its own copy.
fn fixture() -> &'static tempfile::TempDir {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        common::clustered_project(dir.path());
        dir
    })
}

fn project_copy() -> tempfile::TempDir {
    let src = fixture().path();
    let dst = tempfile::tempdir().unwrap();
    copy_dir(src, dst.path());
    dst
}

fn copy_dir(src: &std::path::Path, dst: &std::path::Path) {
    for e in std::fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        let to = dst.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            std::fs::create_dir_all(&to).unwrap();
            copy_dir(&e.path(), &to);
        } else {
            std::fs::copy(e.path(), to).unwrap();
        }
    }
}

fn get_kv(client: &Client, url: &str) -> Vec<Record> {
    let resp = client.get(url).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK, "{url}");
    kv::decode(&resp.text().unwrap()).unwrap()
}

fn put(client: &Client, server: &Server, id: &str, body: &str) -> reqwest::blocking::Response {
    client
        .put(server.url(&format!("/clusters/{id}/annotation")))
        .body(body.to_string())
        .send()
        .unwrap()
}

fn revision(client: &Client, server: &Server) -> u64 {
    get_kv(client, &server.url("/clusters"))[0].parse_field("revision").unwrap()
}

fn blend(g: u8, c: u8) -> u8 {
    (0.6 * g as f64 + 0.4 * c as f64).round() as u8
}

#[test]
fn health_and_palette() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let client = Client::new();
    let h = get_kv(&client, &server.url("/healthz"));
    assert_eq!(h[0].get("status"), Some("ok"));
    assert_eq!(h[0].get("clusters"), Some("13"));
    let palette = get_kv(&client, &server.url("/palette"));
    let names: Vec<&str> = palette.iter().map(|r| r.get("color").unwrap()).collect();
    assert_eq!(names, ["green", "yellow", "orange", "red", "blue", "neutral"]);
    for (r, sev) in palette.iter().zip(Severity::ALL) {
        let [cr, cg, cb] = sev.rgb();
        assert_eq!(r.get("rgb").unwrap(), format!("#{cr:02x}{cg:02x}{cb:02x}"));
    }
    assert_eq!(palette[5].get("rgb"), Some("#808080"));
}

#[test]
fn clusters_and_images_describe_the_project() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let client = Client::new();
    let records = get_kv(&client, &server.url("/clusters"));
    assert_eq!(records[0].get("clusters"), Some("13"));
    assert_eq!(records.len(), 14);
    let map = ClusterMap::load(dir.path().join("maps/img.map")).unwrap();
    for r in &records[1..] {
        let id: usize = r.parse_field("id").unwrap();
        let n: usize = r.parse_field("patches").unwrap();
        assert_eq!(n, map.labels.iter().filter(|&&l| l == id).count());
        assert!(r.get("color").is_none());
    }
    let images = get_kv(&client, &server.url("/images"));
    assert_eq!(images.len(), 1);
    assert_eq!(images[0].get("id"), Some("img"));
    assert_eq!(images[0].get("patches"), Some("81"));
    assert_eq!(images[0].get("overlay"), Some("/images/img/overlay.png"));
}

#[test]
fn red_annotation_tints_its_cluster_in_the_overlay() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let client = Client::new();

    let map = ClusterMap::load(dir.path().join("maps/img.map")).unwrap();
    let pl = pixel_labels(&map, ResolveMode::Majority);
    let gray = GrayImage::load(dir.path().join("img.png")).unwrap();
    assert!(pl.labels.contains(&12), "fixture must show cluster 12");

    let decode = |bytes: &[u8]| image::load_from_memory(bytes).unwrap().to_rgb8();
    let before = decode(&client.get(server.url("/images/img/overlay.png")).send().unwrap().bytes().unwrap());

    let resp = put(&client, &server, "12", "name=Atypical spread\ncolor=red\n");
    assert_eq!(resp.status(), StatusCode::OK);
    let rec = kv::decode_one(&resp.text().unwrap()).unwrap();
    assert_eq!(rec.get("color"), Some("red"));
    assert_eq!(rec.get("revision"), Some("1"));

    let resp = client.get(server.url("/images/img/overlay.png")).send().unwrap();
    assert_eq!(resp.headers()["content-type"], "image/png");
    let after = decode(&resp.bytes().unwrap());
    let red = Severity::Red.rgb();
    let mut tinted = 0;
    for y in 0..256 {
        for x in 0..256 {
            let g = gray.get(x, y);
            let px = after.get_pixel(x as u32, y as u32).0;
            if pl.get(x, y) == 12 {
                assert_eq!(px, [blend(g, red[0]), blend(g, red[1]), blend(g, red[2])], "({x}, {y})");
                tinted += 1;
            } else {
                assert_eq!(px, before.get_pixel(x as u32, y as u32).0, "({x}, {y}) changed");
                assert_eq!(px, [blend(g, 128); 3]);
            }
        }
    }
    assert!(tinted > 0);

    // persisted as editable text
    let saved = AnnotationSet::load(dir.path().join("annotations.toml")).unwrap();
    assert_eq!(saved.get(12).unwrap().name, "Atypical spread");
    assert_eq!(saved.get(12).unwrap().color, Color::Code(Severity::Red));
}

#[test]
fn bad_requests_are_refused() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let client = Client::new();
    assert_eq!(put(&client, &server, "13", "name=x\ncolor=red\n").status(), StatusCode::NOT_FOUND);
    assert_eq!(put(&client, &server, "abc", "name=x\ncolor=red\n").status(), StatusCode::NOT_FOUND);
    assert_eq!(put(&client, &server, "2", "name=x\ncolor=purple\n").status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(put(&client, &server, "2", "name=x\ncolor=#12345\n").status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(put(&client, &server, "2", "color=red\n").status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(put(&client, &server, "2", "name=x\ncolor=red\nextra=1\n").status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        client.get(server.url("/clusters/99/exemplars")).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(client.get(server.url("/images/zzz/overlay.png")).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(revision(&client, &server), 0);
    assert!(!dir.path().join("annotations.toml").exists());
}

#[test]
fn stale_revisions_conflict_and_repeats_are_no_ops() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let client = Client::new();
    let with_rev = |rev: &str, body: &str| {
        client
            .put(server.url("/clusters/4/annotation"))
            .header("If-Match", rev)
            .body(body.to_string())
            .send()
            .unwrap()
    };
    let resp = with_rev("0", "name=a\ncolor=green\n");
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["etag"], "1");
    assert_eq!(with_rev("0", "name=b\ncolor=blue\n").status(), StatusCode::CONFLICT);
    assert_eq!(with_rev("1", "name=b\ncolor=#00ff00\n").status(), StatusCode::OK);
    assert_eq!(revision(&client, &server), 2);

    // the same body again changes nothing
    let file = std::fs::read(dir.path().join("annotations.toml")).unwrap();
    assert_eq!(put(&client, &server, "4", "name=b\ncolor=#00ff00\n").status(), StatusCode::OK);
    assert_eq!(revision(&client, &server), 2);
    assert_eq!(std::fs::read(dir.path().join("annotations.toml")).unwrap(), file);

    // GETs never mutate
    for _ in 0..3 {
        get_kv(&client, &server.url("/clusters"));
        client.get(server.url("/images/img/overlay.png")).send().unwrap();
        client.get(server.url("/clusters/4/exemplars?n=2")).send().unwrap();
    }
    assert_eq!(revision(&client, &server), 2);
}

#[test]
fn exemplars_are_seeded_clamped_and_from_their_cluster() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let client = Client::new();
    let map = ClusterMap::load(dir.path().join("maps/img.map")).unwrap();
    let id = (0..13).max_by_key(|&c| map.labels.iter().filter(|&&l| l == c).count()).unwrap();
    let size = map.labels.iter().filter(|&&l| l == id).count();

    let page = get_kv(&client, &server.url(&format!("/clusters/{id}/exemplars?n=1000&seed=3")));
    assert_eq!(page[0].parse_field::<usize>("total").unwrap(), size);
    assert_eq!(page[0].parse_field::<usize>("returned").unwrap(), size);
    assert_eq!(page.len(), size + 1);

    let gray = GrayImage::load(dir.path().join("img.png")).unwrap();
    let (_, patches) = tile(&gray, &map.grid.spec).unwrap();
    let mut seen = std::collections::HashSet::new();
    for r in &page[1..] {
        let row: usize = r.parse_field("patch").unwrap();
        assert!(seen.insert(row), "patch {row} returned twice");
        assert_eq!(map.labels[row], id);
        assert_eq!(r.get("image"), Some("img"));
        let (gr, gc) = map.grid.position(row);
        assert_eq!((r.parse_field::<usize>("row").unwrap(), r.parse_field::<usize>("col").unwrap()), (gr, gc));
        let png = base64::engine::general_purpose::STANDARD.decode(r.get("png").unwrap()).unwrap();
        let thumb = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(thumb.as_raw(), &patches[row].pixels);
    }

    let a = client.get(server.url(&format!("/clusters/{id}/exemplars?n=2&seed=9"))).send().unwrap().text().unwrap();
    let b = client.get(server.url(&format!("/clusters/{id}/exemplars?n=2&seed=9"))).send().unwrap().text().unwrap();
    assert_eq!(a, b);
    assert_eq!(kv::decode(&a).unwrap().len(), 3);
}

#[test]
fn concurrent_writes_leave_one_intact_winner() {
    let dir = project_copy();
    let server = Server::start(dir.path());
    let bodies = ["name=first writer\ncolor=orange\n", "name=second writer\ncolor=#0a0b0c\n"];
    std::thread::scope(|s| {
        for body in bodies {
            let server = &server;
            s.spawn(move || {
                let client = Client::new();
                for _ in 0..25 {
                    assert_eq!(put(&client, server, "7", body).status(), StatusCode::OK);
                }
            });
        }
    });
    let client = Client::new();
    let records = get_kv(&client, &server.url("/clusters"));
    let rec = &records[8];
    assert_eq!(rec.get("id"), Some("7"));
    let served = format!("name={}\ncolor={}\n", rec.get("name").unwrap(), rec.get("color").unwrap());
    assert!(bodies.contains(&served.as_str()), "{served:?}");

    let saved = AnnotationSet::load(dir.path().join("annotations.toml")).unwrap();
    let a = saved.get(7).unwrap();
    assert_eq!(format!("name={}\ncolor={}\n", a.name, a.color), served);
    assert_eq!(saved.entries.len(), 1);
}
