// Three-viewport mesh display: the anchor gets its own camera, the two
// candidates share one camera instance so orbiting either keeps both
// poses locked together for comparison.

import * as THREE from "three";
import { OrbitControls } from "three/addons/controls/OrbitControls.js";
import { ParsedMesh, boundingRadius } from "./obj.js";

interface Viewport {
  renderer: THREE.WebGLRenderer;
  scene: THREE.Scene;
  camera: THREE.PerspectiveCamera;
  controls: OrbitControls;
}

function makeScene(): THREE.Scene {
  const scene = new THREE.Scene();
  scene.background = new THREE.Color(0x181c22);
  const key = new THREE.DirectionalLight(0xffffff, 2.2);
  key.position.set(1, 1, 2);
  scene.add(key);
  const fill = new THREE.DirectionalLight(0x8899bb, 0.8);
  fill.position.set(-1, 0.3, -1);
  scene.add(fill);
  scene.add(new THREE.AmbientLight(0x404040, 1.2));
  return scene;
}

function toGeometry(mesh: ParsedMesh): THREE.BufferGeometry {
  const geo = new THREE.BufferGeometry();
  geo.setAttribute("position", new THREE.BufferAttribute(mesh.positions, 3));
  geo.setAttribute("normal", new THREE.BufferAttribute(mesh.normals, 3));
  geo.center();
  return geo;
}

export class TripletViewer {
  private anchor: Viewport;
  private left: Viewport;
  private right: Viewport;
  private sharedCamera: THREE.PerspectiveCamera;

  constructor(anchorCanvas: HTMLCanvasElement, leftCanvas: HTMLCanvasElement, rightCanvas: HTMLCanvasElement) {
    const mk = (canvas: HTMLCanvasElement, camera: THREE.PerspectiveCamera): Viewport => {
      const renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
      renderer.setSize(canvas.clientWidth, canvas.clientHeight, false);
      const controls = new OrbitControls(camera, canvas);
      controls.enableDamping = false;
      return { renderer, scene: makeScene(), camera, controls };
    };
    const anchorCam = new THREE.PerspectiveCamera(40, 1, 0.01, 100);
    this.sharedCamera = new THREE.PerspectiveCamera(40, 1, 0.01, 100);
    this.anchor = mk(anchorCanvas, anchorCam);
    // both candidate canvases drive the same camera: dragging one mirrors
    // the pose on the other
    this.left = mk(leftCanvas, this.sharedCamera);
    this.right = mk(rightCanvas, this.sharedCamera);
    this.animate();
  }

  private setMesh(vp: Viewport, mesh: ParsedMesh, color: number): void {
    for (const obj of [...vp.scene.children]) {
      if (obj instanceof THREE.Mesh) {
        vp.scene.remove(obj);
        obj.geometry.dispose();
      }
    }
    const material = new THREE.MeshStandardMaterial({ color, flatShading: true, side: THREE.DoubleSide });
    vp.scene.add(new THREE.Mesh(toGeometry(mesh), material));
    const r = boundingRadius(mesh);
    vp.camera.position.set(0, 0, 3 * r);
    vp.camera.near = r / 100;
    vp.camera.far = r * 50;
    vp.camera.updateProjectionMatrix();
    vp.controls.target.set(0, 0, 0);
    vp.controls.update();
  }

  showTriplet(anchorMesh: ParsedMesh, leftMesh: ParsedMesh, rightMesh: ParsedMesh): void {
    this.setMesh(this.anchor, anchorMesh, 0xd9b38c);
    this.setMesh(this.left, leftMesh, 0x8cb4d9);
    this.setMesh(this.right, rightMesh, 0x9cd98c);
  }

  private animate = (): void => {
    requestAnimationFrame(this.animate);
    for (const vp of [this.anchor, this.left, this.right]) {
      const canvas = vp.renderer.domElement;
      const w = canvas.clientWidth;
      const h = canvas.clientHeight;
      if (canvas.width !== w || canvas.height !== h) {
        vp.renderer.setSize(w, h, false);
        vp.camera.aspect = w / Math.max(h, 1);
        vp.camera.updateProjectionMatrix();
      }
      vp.controls.update();
      vp.renderer.render(vp.scene, vp.camera);
    }
  };
}
