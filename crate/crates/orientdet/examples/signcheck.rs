//! Internal: sign conventions of make_view rotation vs orientation field.
use orientdet::geom::*;
use orientdet::netcore::orientation_field;
use orientdet::synthdata::*;

fn main() {
    let mut scfg = SceneConfig::default();
    scfg.image_size = 128;
    scfg.objects_min = 1;
    scfg.objects_max = 1;
    scfg.size_range = (40.0, 60.0);
    scfg.seed = 3;
    let th = std::f64::consts::FRAC_PI_6;
    for idx in 0..5u64 {
        let sc = generate_scene(&scfg, idx).unwrap();
        let pts: Vec<PointLabel> = sc.boxes.iter().map(|(b,c)| PointLabel{x:b.cx,y:b.cy,class_id:*c}).collect();
        let t = ViewTransform::rotate(th, 128);
        let v = make_view(&sc.image, &sc.boxes, &pts, &t);
        let (b0, _) = sc.boxes[0];
        let (b1, _) = v.boxes[0];
        // field at the object's center cell, stride 8
        let f0 = orientation_field(&sc.image, 8);
        let f1 = orientation_field(&v.image, 8);
        let read = |f: &orientdet::nn::Tensor, cx: f64, cy: f64| {
            let lw = f.shape()[2]; let lh = f.shape()[1];
            let i = ((cy/8.0) as usize).min(lh-1); let j = ((cx/8.0) as usize).min(lw-1);
            f.data()[2*lh*lw + i*lw + j]
        };
        let p0 = read(&f0, b0.cx, b0.cy);
        let p1 = read(&f1, b1.cx, b1.cy);
        println!("gt {:+.3} -> view gt {:+.3} (gt+th {:+.3}); field {:+.3} -> {:+.3} (field+th {:+.3})",
            b0.theta, b1.theta, normalize_half_pi(b0.theta+th), p0, p1, normalize_half_pi(p0+th));
    }
}
